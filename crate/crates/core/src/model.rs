//! The knowledge-infused multimodal transformer.
//!
//! A joint sequence `[CLS] query [SEP] knowledge [SEP] regions` of length
//! `L + M + N + 3` runs through `T` encoder layers; the `[CLS]` output feeds
//! the alignment head and text positions feed the MLM head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowRef, Var};
use crate::error::{Error, Result};
use crate::nn::{linear, EncoderLayer, NormIds, EMBED_STD};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::{TextEncoder, NUM_RESERVED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    /// Joint encoder layers.
    pub layers: usize,
    pub heads: usize,
    /// Query length L.
    pub query_len: usize,
    /// Knowledge length M.
    pub knowledge_len: usize,
    /// Region count N.
    pub regions: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    pub appearance_dim: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 768,
            layers: 3,
            heads: 8,
            query_len: 40,
            knowledge_len: 80,
            regions: 50,
            mlp_hidden: 512,
            vocab_size: 0,
            text_layers: 2,
            appearance_dim: 2048,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d: 64,
            layers: 2,
            heads: 4,
            query_len: 12,
            knowledge_len: 24,
            regions: 8,
            mlp_hidden: 128,
            vocab_size,
            text_layers: 2,
            appearance_dim: 64,
            ln_eps: 1e-5,
        }
    }

    /// Gradient-check sized configuration.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d: 16,
            layers: 1,
            heads: 2,
            query_len: 4,
            knowledge_len: 5,
            regions: 3,
            mlp_hidden: 8,
            vocab_size,
            text_layers: 1,
            appearance_dim: 6,
            ln_eps: 1e-5,
        }
    }

    /// `L + M + N + 3`.
    pub fn seq_len(&self) -> usize {
        self.query_len + self.knowledge_len + self.regions + 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("query_len", self.query_len),
            ("knowledge_len", self.knowledge_len),
            ("regions", self.regions),
            ("mlp_hidden", self.mlp_hidden),
            ("appearance_dim", self.appearance_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model.d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::invalid("model.vocab_size must exceed the reserved ids"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("model.ln_eps must be positive"));
        }
        Ok(())
    }
}

/// Segment label of a joint-sequence position (bookkeeping only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Cls,
    Query,
    Sep,
    Knowledge,
    Region,
}

/// Segment label of every position of the joint layout.
pub fn segments(l: usize, m: usize, n: usize) -> Vec<Segment> {
    let mut s = Vec::with_capacity(l + m + n + 3);
    s.push(Segment::Cls);
    s.extend(std::iter::repeat(Segment::Query).take(l));
    s.push(Segment::Sep);
    s.extend(std::iter::repeat(Segment::Knowledge).take(m));
    s.push(Segment::Sep);
    s.extend(std::iter::repeat(Segment::Region).take(n));
    s
}

/// Detected regions of one image: appearance vectors and normalised boxes
/// `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureSet {
    pub appearance_dim: usize,
    pub appearance: Vec<f32>,
    pub bbox: Vec<f32>,
}

impl RegionFeatureSet {
    pub fn new(appearance_dim: usize, appearance: Vec<f32>, bbox: Vec<f32>) -> Result<Self> {
        if appearance_dim == 0 {
            return Err(Error::invalid("appearance dimension must be positive"));
        }
        if appearance.len() % appearance_dim != 0 || bbox.len() != 4 * (appearance.len() / appearance_dim) {
            return Err(Error::shape(
                "RegionFeatureSet",
                format!(
                    "{} appearance values and {} box values for width {appearance_dim}",
                    appearance.len(),
                    bbox.len()
                ),
            ));
        }
        let set = RegionFeatureSet {
            appearance_dim,
            appearance,
            bbox,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.bbox.len() / 4
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.appearance.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("region appearance".into()));
        }
        for b in self.bbox.chunks_exact(4) {
            let ok = b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] <= b[2] && b[1] <= b[3];
            if !ok {
                return Err(Error::Validation(format!("bounding box {b:?} is not normalised")));
            }
        }
        Ok(())
    }

    /// Appearance `[n×A]`, boxes `[n×4]` and validity mask, truncated or
    /// zero-padded to exactly `n` regions.
    pub fn padded(&self, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let a = self.appearance_dim;
        let keep = self.len().min(n);
        let mut app: Vec<f64> = self.appearance[..keep * a].iter().map(|&v| v as f64).collect();
        app.resize(n * a, 0.0);
        let mut bbox: Vec<f64> = self.bbox[..keep * 4].iter().map(|&v| v as f64).collect();
        bbox.resize(n * 4, 0.0);
        let mut mask = vec![true; keep];
        mask.resize(n, false);
        (app, bbox, mask)
    }
}

/// Modality ablations applied at assembly time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Mask every knowledge position.
    pub no_knowledge: bool,
    /// Mask every region position.
    pub no_vision: bool,
}

/// Pre-computed modality features and, per example, which rows to use.
#[derive(Clone, Debug)]
pub struct JointInputs<'a> {
    /// `[nq·L × d]`.
    pub query: Var,
    pub query_mask: &'a [bool],
    /// `[nk·M × d]`, absent when no example carries knowledge.
    pub knowledge: Option<Var>,
    pub knowledge_mask: &'a [bool],
    /// `[nr·N × d]`.
    pub regions: Var,
    pub region_mask: &'a [bool],
    /// `(query block, knowledge block, region block)` per example. A missing
    /// knowledge block leaves zero, masked knowledge slots.
    pub pairs: &'a [(usize, Option<usize>, usize)],
}

#[derive(Clone, Debug)]
pub struct JointOutput {
    /// `[batch·S × d]`.
    pub hidden: Var,
    /// `[batch × 1]`.
    pub logits: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
}

/// The full parameter set and its structure.
#[derive(Clone, Debug)]
pub struct Kramt {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    pub w_cnn: ParamId,
    pub cnn_norm: NormIds,
    pub w_bbox: ParamId,
    pub bbox_norm: NormIds,
    pub cls: ParamId,
    pub sep: ParamId,
    /// `[(L+M) × d]`, added to query and knowledge positions only.
    pub joint_position: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
    pub mlm_w: ParamId,
    pub mlm_b: ParamId,
}

impl Kramt {
    /// Freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let text = TextEncoder::init(
            &mut p,
            "text",
            c.vocab_size,
            c.d,
            c.query_len.max(c.knowledge_len),
            c.text_layers,
            c.heads,
            c.ln_eps,
            &mut rng,
        )?;
        let w_cnn = p.insert("vision.w_cnn", Tensor::xavier(c.appearance_dim, c.d, &mut rng))?;
        let cnn_norm = NormIds::init(&mut p, "vision.cnn_norm", c.d)?;
        let w_bbox = p.insert("vision.w_bbox", Tensor::xavier(4, c.d, &mut rng))?;
        let bbox_norm = NormIds::init(&mut p, "vision.bbox_norm", c.d)?;
        let cls = p.insert("joint.cls", Tensor::randn(&[1, c.d], EMBED_STD, &mut rng))?;
        let sep = p.insert("joint.sep", Tensor::randn(&[1, c.d], EMBED_STD, &mut rng))?;
        let joint_position = p.insert(
            "joint.position_embedding",
            Tensor::randn(&[c.query_len + c.knowledge_len, c.d], EMBED_STD, &mut rng),
        )?;
        let layers = (0..c.layers)
            .map(|i| EncoderLayer::init(&mut p, &format!("joint.layer{i}"), c.d, 4 * c.d, &mut rng))
            .collect::<Result<_>>()?;
        let head_w1 = p.insert("align.w1", Tensor::xavier(c.d, c.mlp_hidden, &mut rng))?;
        let head_b1 = p.insert("align.b1", Tensor::zeros(&[c.mlp_hidden]))?;
        let head_w2 = p.insert("align.w2", Tensor::xavier(c.mlp_hidden, 1, &mut rng))?;
        let head_b2 = p.insert("align.b2", Tensor::zeros(&[1]))?;
        let mlm_w = p.insert("mlm.w", Tensor::xavier(c.d, c.vocab_size, &mut rng))?;
        let mlm_b = p.insert("mlm.b", Tensor::zeros(&[c.vocab_size]))?;
        Ok(Kramt {
            config,
            params: p,
            text,
            w_cnn,
            cnn_norm,
            w_bbox,
            bbox_norm,
            cls,
            sep,
            joint_position,
            layers,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            mlm_w,
            mlm_b,
        })
    }

    /// Rebuilds the structure for `config` and adopts `params`, which must
    /// carry exactly the expected names and shapes in order.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Kramt::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((en, et), (gn, gt)) in model.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {gn} {:?} does not match expected {en} {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Per-parameter learning-rate multipliers: `text_scale` for the text
    /// encoder, 1 elsewhere.
    pub fn lr_scales(&self, text_scale: f64) -> Vec<f64> {
        let mut s = vec![1.0; self.params.len()];
        for id in self.text.ids() {
            s[id.index()] = text_scale;
        }
        s
    }

    /// `LayerNorm(R_cnn W_cnn) + LayerNorm(R_bbox W_bbox)` per region row.
    pub fn project_regions(&self, g: &mut Graph, p: &Bound, appearance: Var, bbox: Var) -> Result<Var> {
        let eps = self.config.ln_eps;
        let a = g.matmul(appearance, p[self.w_cnn])?;
        let a = self.cnn_norm.apply(g, p, a, eps)?;
        let b = g.matmul(bbox, p[self.w_bbox])?;
        let b = self.bbox_norm.apply(g, p, b, eps)?;
        g.add(a, b)
    }

    /// Stacks and projects region sets; returns features `[k·N × d]` and the
    /// validity mask.
    pub fn encode_regions(
        &self,
        g: &mut Graph,
        p: &Bound,
        sets: &[&RegionFeatureSet],
    ) -> Result<(Var, Vec<bool>)> {
        let (n, a) = (self.config.regions, self.config.appearance_dim);
        let mut app = Vec::with_capacity(sets.len() * n * a);
        let mut bbox = Vec::with_capacity(sets.len() * n * 4);
        let mut mask = Vec::with_capacity(sets.len() * n);
        for s in sets {
            if s.appearance_dim != a {
                return Err(Error::shape(
                    "project_regions",
                    format!("appearance width {} but model expects {a}", s.appearance_dim),
                ));
            }
            let (ap, bb, m) = s.padded(n);
            app.extend(ap);
            bbox.extend(bb);
            mask.extend(m);
        }
        let app = g.constant(vec![sets.len() * n, a], app)?;
        let bbox = g.constant(vec![sets.len() * n, 4], bbox)?;
        Ok((self.project_regions(g, p, app, bbox)?, mask))
    }

    /// Gathers the joint sequences for every example, runs the encoder stack
    /// and the alignment head.
    pub fn encode_joint(&self, g: &mut Graph, p: &Bound, inp: &JointInputs, ablation: Ablation) -> Result<JointOutput> {
        let c = &self.config;
        let (l, m, n, d) = (c.query_len, c.knowledge_len, c.regions, c.d);
        let s = c.seq_len();
        let batch = inp.pairs.len();
        if batch == 0 {
            return Err(Error::invalid("joint encoder needs at least one example"));
        }
        let check = |g: &Graph, v: Var, block: usize, mask_len: usize, what: &str| -> Result<usize> {
            let shape = g.shape(v);
            if shape.len() != 2 || shape[1] != d || shape[0] % block != 0 || mask_len != shape[0] {
                return Err(Error::shape(
                    "assemble_sequence",
                    format!("{what} features {shape:?} with {mask_len} mask entries for blocks of {block} × {d}"),
                ));
            }
            Ok(shape[0] / block)
        };
        let nq = check(g, inp.query, l, inp.query_mask.len(), "query")?;
        let nr = check(g, inp.regions, n, inp.region_mask.len(), "region")?;
        let nk = match inp.knowledge {
            Some(k) => check(g, k, m, inp.knowledge_mask.len(), "knowledge")?,
            None => 0,
        };
        // Source slots for gather_rows.
        const Q: usize = 0;
        const R: usize = 1;
        const CLS: usize = 2;
        const SEP: usize = 3;
        const K: usize = 4;
        let mut sources = vec![inp.query, inp.regions, p[self.cls], p[self.sep]];
        if let Some(k) = inp.knowledge {
            sources.push(k);
        }
        let mut rows: Vec<RowRef> = Vec::with_capacity(batch * s);
        let mut pos: Vec<RowRef> = Vec::with_capacity(batch * s);
        let mut mask = Vec::with_capacity(batch * s);
        for &(qi, ki, ri) in inp.pairs {
            if qi >= nq || ri >= nr || ki.is_some_and(|k| k >= nk) {
                return Err(Error::invalid(format!("pair ({qi}, {ki:?}, {ri}) out of range")));
            }
            rows.push(Some((CLS, 0)));
            pos.push(None);
            mask.push(true);
            for j in 0..l {
                rows.push(Some((Q, qi * l + j)));
                pos.push(Some((0, j)));
                mask.push(inp.query_mask[qi * l + j]);
            }
            rows.push(Some((SEP, 0)));
            pos.push(None);
            mask.push(true);
            for j in 0..m {
                match ki {
                    Some(k) => {
                        rows.push(Some((K, k * m + j)));
                        mask.push(!ablation.no_knowledge && inp.knowledge_mask[k * m + j]);
                    }
                    None => {
                        rows.push(None);
                        mask.push(false);
                    }
                }
                pos.push(Some((0, l + j)));
            }
            rows.push(Some((SEP, 0)));
            pos.push(None);
            mask.push(true);
            for j in 0..n {
                rows.push(Some((R, ri * n + j)));
                pos.push(None);
                mask.push(!ablation.no_vision && inp.region_mask[ri * n + j]);
            }
        }
        let x = g.gather_rows(&sources, &rows)?;
        let pe = g.gather_rows(&[p[self.joint_position]], &pos)?;
        let mut x = g.add(x, pe)?;
        for layer in &self.layers {
            x = layer.forward(g, p, x, &mask, batch, s, c.heads, c.ln_eps)?;
        }
        let cls_rows: Vec<RowRef> = (0..batch).map(|b| Some((0, b * s))).collect();
        let cls = g.gather_rows(&[x], &cls_rows)?;
        let logits = self.alignment_head(g, p, cls)?;
        Ok(JointOutput {
            hidden: x,
            logits,
            mask,
            batch,
        })
    }

    /// `w₂ · ReLU(W₁ · cls + b₁) + b₂` for every row of `cls: [B × d]`.
    pub fn alignment_head(&self, g: &mut Graph, p: &Bound, cls: Var) -> Result<Var> {
        let h = linear(g, cls, p[self.head_w1], Some(p[self.head_b1]))?;
        let h = g.relu(h);
        linear(g, h, p[self.head_w2], Some(p[self.head_b2]))
    }

    /// Vocabulary logits for every row of `text_features`.
    pub fn mlm_head(&self, g: &mut Graph, p: &Bound, text_features: Var) -> Result<Var> {
        linear(g, text_features, p[self.mlm_w], Some(p[self.mlm_b]))
    }

    /// Logits `[(L+M) × V]` at the text positions of example `b` of a joint
    /// output.
    pub fn mlm_logits(&self, g: &mut Graph, p: &Bound, out: &JointOutput, b: usize) -> Result<Var> {
        let rows = self.text_rows(b);
        let idx: Vec<RowRef> = rows.into_iter().map(|r| Some((0, r))).collect();
        let t = g.gather_rows(&[out.hidden], &idx)?;
        self.mlm_head(g, p, t)
    }

    /// Joint-sequence rows of example `b` holding query then knowledge tokens.
    pub fn text_rows(&self, b: usize) -> Vec<usize> {
        let c = &self.config;
        let base = b * c.seq_len();
        (0..c.query_len)
            .map(|j| base + 1 + j)
            .chain((0..c.knowledge_len).map(|j| base + c.query_len + 2 + j))
            .collect()
    }
}
