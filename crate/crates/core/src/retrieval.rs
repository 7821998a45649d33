//! Visual-entity and query-aware knowledge retrieval: fuse wikification
//! likelihoods with query–knowledge similarity and keep one knowledge text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One linking hypothesis for an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub s_iw: f64,
}

/// Checks the candidate-list contract: non-empty, likelihoods in `[0, 1]`,
/// sorted by descending likelihood, no repeated entity.
pub fn validate_candidates(cands: &[Candidate]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Validation("empty candidate list".into()));
    }
    for (i, c) in cands.iter().enumerate() {
        if !(0.0..=1.0).contains(&c.s_iw) {
            return Err(Error::Validation(format!(
                "likelihood {} of {} outside [0, 1]",
                c.s_iw, c.entity_id
            )));
        }
        if i > 0 && cands[i - 1].s_iw < c.s_iw {
            return Err(Error::Validation("candidates not sorted by likelihood".into()));
        }
        if cands[..i].iter().any(|o| o.entity_id == c.entity_id) {
            return Err(Error::Validation(format!("duplicate candidate {}", c.entity_id)));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Keep the candidate with the largest fused score.
    Argmax,
    /// Always supply the ground-truth entity's knowledge.
    Oracle,
    /// No knowledge at all.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: FusionMode,
    pub top_k: usize,
    /// Min-max normalise both score lists over the candidates before fusing.
    pub normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.5,
            beta: 0.5,
            mode: FusionMode::Argmax,
            top_k: 5,
            normalize: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("fusion weights must be non-negative"));
        }
        if self.mode == FusionMode::Argmax && self.alpha + self.beta <= 0.0 {
            return Err(Error::invalid("argmax fusion needs alpha + beta > 0"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "score_query_knowledge",
            format!("widths {} and {}", a.len(), b.len()),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        v.to_vec()
    }
}

/// `α·s_iw + β·s_qk` over the first `top_k` candidates. `s_qk` may cover the
/// whole list or just the truncated prefix.
pub fn fuse_scores(cands: &[Candidate], s_qk: &[f64], cfg: &FusionConfig) -> Result<Vec<f64>> {
    if cands.is_empty() {
        return Err(Error::invalid("cannot fuse an empty candidate list"));
    }
    let n = cands.len().min(cfg.top_k.max(1));
    if s_qk.len() != n && s_qk.len() != cands.len() {
        return Err(Error::shape(
            "fuse_scores",
            format!("{} similarities for {n} candidates", s_qk.len()),
        ));
    }
    let mut iw: Vec<f64> = cands[..n].iter().map(|c| c.s_iw).collect();
    let mut qk = s_qk[..n].to_vec();
    if cfg.normalize {
        iw = min_max(&iw);
        qk = min_max(&qk);
    }
    Ok(iw
        .iter()
        .zip(&qk)
        .map(|(a, b)| cfg.alpha * a + cfg.beta * b)
        .collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.map_or(true, |b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub entity_id: String,
    /// Position among the candidates, `None` when an oracle supplies an
    /// entity the recogniser never proposed.
    pub candidate_index: Option<usize>,
    pub fused: Vec<f64>,
    /// One-hot over the fused candidates (all zeros in the oracle case
    /// above).
    pub one_hot: Vec<f64>,
}

/// Applies the gating `s = Ψ(fused)` and returns the chosen entity.
pub fn select_knowledge(fused: &[f64], cands: &[Candidate]) -> Result<Selection> {
    let idx = argmax(fused).ok_or_else(|| Error::invalid("no fused scores to select from"))?;
    let c = cands
        .get(idx)
        .ok_or_else(|| Error::shape("select_knowledge", "more scores than candidates"))?;
    let mut one_hot = vec![0.0; fused.len()];
    one_hot[idx] = 1.0;
    Ok(Selection {
        entity_id: c.entity_id.clone(),
        candidate_index: Some(idx),
        fused: fused.to_vec(),
        one_hot,
    })
}

/// Full retrieval step for one (image, query) pair. Returns `None` in
/// [`FusionMode::None`].
pub fn retrieve(
    cands: &[Candidate],
    s_qk: &[f64],
    gt_entity: Option<&str>,
    cfg: &FusionConfig,
) -> Result<Option<Selection>> {
    match cfg.mode {
        FusionMode::None => Ok(None),
        FusionMode::Argmax => {
            let fused = fuse_scores(cands, s_qk, cfg)?;
            select_knowledge(&fused, cands).map(Some)
        }
        FusionMode::Oracle => {
            let gt = gt_entity.ok_or_else(|| Error::invalid("oracle mode needs a ground-truth entity"))?;
            let fused = fuse_scores(cands, s_qk, cfg)?;
            let idx = cands[..fused.len()].iter().position(|c| c.entity_id == gt);
            let mut one_hot = vec![0.0; fused.len()];
            if let Some(i) = idx {
                one_hot[i] = 1.0;
            }
            Ok(Some(Selection {
                entity_id: gt.to_string(),
                candidate_index: idx,
                fused,
                one_hot,
            }))
        }
    }
}
