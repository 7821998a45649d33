//! Corpus files: entities, candidates, queries, vocabulary and region
//! features tied together by `manifest.json`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::regions::read_region_file;
use crate::error::{Error, Result};
use crate::model::RegionFeatureSet;
use crate::retrieval::{validate_candidates, Candidate};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Brand,
    Celeb,
    Landmark,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub name: String,
    pub category: Category,
    pub knowledge_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_entity_id: Option<String>,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Commonsense,
    Factual,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub image_id: String,
    #[serde(default)]
    pub tags: Vec<Tag>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub gallery_small: Vec<String>,
    pub gallery_large: Vec<String>,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entities: PathBuf,
    pub images_dir: PathBuf,
    pub candidates: PathBuf,
    pub queries: PathBuf,
    pub vocab: PathBuf,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    GallerySmall,
    GalleryLarge,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::GallerySmall => "gallery_small",
            Split::GalleryLarge => "gallery_large",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "gallery_small" => Ok(Split::GallerySmall),
            "gallery_large" => Ok(Split::GalleryLarge),
            _ => Err(Error::invalid(format!(
                "unknown split {s:?} (train, gallery_small, gallery_large)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryImage {
    pub image_id: String,
    pub regions: RegionFeatureSet,
    pub candidates: Vec<Candidate>,
    pub gt_entity_id: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub entities: Vec<EntityRecord>,
    pub images: Vec<GalleryImage>,
    pub queries: Vec<QueryRecord>,
    pub vocab: Vocabulary,
    entity_index: HashMap<String, usize>,
    image_index: HashMap<String, usize>,
}

/// Summary figures logged after loading.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub images: usize,
    pub queries: usize,
    pub entities: usize,
    pub mean_query_tokens: f64,
    pub vocab_size: usize,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = crate::error::read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// File name of an image's region features inside `images_dir`.
pub fn region_file_name(image_id: &str) -> String {
    format!("{image_id}.krff")
}

impl Corpus {
    /// Reads and cross-validates every file referenced by the manifest.
    pub fn load(manifest_path: &Path, appearance_dim: Option<usize>) -> Result<Self> {
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let manifest: Manifest = serde_json::from_str(&crate::error::read_text(manifest_path)?)
            .map_err(|e| Error::Format {
                path: manifest_path.to_path_buf(),
                msg: e.to_string(),
            })?;
        let at = |p: &Path| root.join(p);

        let entities: Vec<EntityRecord> = read_jsonl(&at(&manifest.entities))?;
        let mut entity_index = HashMap::new();
        for (i, e) in entities.iter().enumerate() {
            if e.knowledge_text.trim().is_empty() {
                return Err(Error::Validation(format!("entity {} has empty knowledge text", e.entity_id)));
            }
            if entity_index.insert(e.entity_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate entity id {}", e.entity_id)));
            }
        }

        let vocab = Vocabulary::load(&at(&manifest.vocab))?;

        let cand_path = at(&manifest.candidates);
        let cand_records: Vec<CandidateRecord> = read_jsonl(&cand_path)?;
        let images_dir = at(&manifest.images_dir);
        let mut images = Vec::with_capacity(cand_records.len());
        let mut image_index = HashMap::new();
        for (line, rec) in cand_records.into_iter().enumerate() {
            let ctx = |msg: String| Error::Parse {
                path: cand_path.clone(),
                line: line + 1,
                msg,
            };
            validate_candidates(&rec.candidates).map_err(|e| ctx(format!("image {}: {e}", rec.image_id)))?;
            for c in rec.candidates.iter().map(|c| &c.entity_id).chain(&rec.gt_entity_id) {
                if !entity_index.contains_key(c) {
                    return Err(ctx(format!("image {} references unknown entity {c}", rec.image_id)));
                }
            }
            if image_index.insert(rec.image_id.clone(), images.len()).is_some() {
                return Err(ctx(format!("duplicate image id {}", rec.image_id)));
            }
            let regions = read_region_file(&images_dir.join(region_file_name(&rec.image_id)), appearance_dim)?;
            images.push(GalleryImage {
                image_id: rec.image_id,
                regions,
                candidates: rec.candidates,
                gt_entity_id: rec.gt_entity_id,
            });
        }

        let query_path = at(&manifest.queries);
        let queries: Vec<QueryRecord> = read_jsonl(&query_path)?;
        let mut seen = HashSet::new();
        for (line, q) in queries.iter().enumerate() {
            let ctx = |msg: String| Error::Parse {
                path: query_path.clone(),
                line: line + 1,
                msg,
            };
            if q.text.trim().is_empty() {
                return Err(ctx(format!("query {} has empty text", q.query_id)));
            }
            if !image_index.contains_key(&q.image_id) {
                return Err(ctx(format!("query {} references missing image {}", q.query_id, q.image_id)));
            }
            if !seen.insert(q.query_id.clone()) {
                return Err(ctx(format!("duplicate query id {}", q.query_id)));
            }
        }
        for (name, ids) in [
            ("train", &manifest.splits.train),
            ("gallery_small", &manifest.splits.gallery_small),
            ("gallery_large", &manifest.splits.gallery_large),
        ] {
            if let Some(id) = ids.iter().find(|id| !image_index.contains_key(*id)) {
                return Err(Error::Validation(format!("split {name} lists missing image {id}")));
            }
        }

        let corpus = Corpus {
            root,
            manifest,
            entities,
            images,
            queries,
            vocab,
            entity_index,
            image_index,
        };
        let s = corpus.stats();
        log::info!(
            "corpus: {} images, {} queries, {} entities, mean query length {:.2}, vocabulary {}",
            s.images,
            s.queries,
            s.entities,
            s.mean_query_tokens,
            s.vocab_size
        );
        Ok(corpus)
    }

    pub fn stats(&self) -> CorpusStats {
        let tokens: usize = self.queries.iter().map(|q| crate::text::tokenize(&q.text).len()).sum();
        CorpusStats {
            images: self.images.len(),
            queries: self.queries.len(),
            entities: self.entities.len(),
            mean_query_tokens: if self.queries.is_empty() {
                0.0
            } else {
                tokens as f64 / self.queries.len() as f64
            },
            vocab_size: self.vocab.len(),
        }
    }

    pub fn entity(&self, id: &str) -> Option<&EntityRecord> {
        self.entity_index.get(id).map(|&i| &self.entities[i])
    }

    pub fn entity_position(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn image(&self, id: &str) -> Option<&GalleryImage> {
        self.image_index.get(id).map(|&i| &self.images[i])
    }

    pub fn image_position(&self, id: &str) -> Option<usize> {
        self.image_index.get(id).copied()
    }

    pub fn split_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::GallerySmall => &self.manifest.splits.gallery_small,
            Split::GalleryLarge => &self.manifest.splits.gallery_large,
        }
    }

    /// Image positions of a split, sorted by image id.
    pub fn split_images(&self, split: Split) -> Vec<usize> {
        let sorted: BTreeMap<&str, usize> = self
            .split_ids(split)
            .iter()
            .map(|id| (id.as_str(), self.image_index[id]))
            .collect();
        sorted.into_values().collect()
    }

    /// Queries whose ground-truth image belongs to `split`.
    pub fn split_queries(&self, split: Split) -> Vec<&QueryRecord> {
        let ids: HashSet<&str> = self.split_ids(split).iter().map(String::as_str).collect();
        self.queries.iter().filter(|q| ids.contains(q.image_id.as_str())).collect()
    }
}
