//! Building blocks shared by the text encoder and the joint transformer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of embedding-table initialisation.
pub const EMBED_STD: f64 = 0.02;

/// `x · w (+ b)`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Parameter handles of a LayerNorm.
#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormIds {
            gamma: store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]))?,
            beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], eps)
    }
}

/// One post-norm encoder layer: self-attention and a GELU feed-forward block,
/// each followed by residual addition and LayerNorm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm1: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm2: NormIds,
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mat = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            store.insert(format!("{prefix}.{name}"), Tensor::xavier(i, o, rng))
        };
        let wq = mat(store, "attn.wq", d, d)?;
        let wk = mat(store, "attn.wk", d, d)?;
        let wv = mat(store, "attn.wv", d, d)?;
        let wo = mat(store, "attn.wo", d, d)?;
        let w1 = mat(store, "ffn.w1", d, ffn)?;
        let w2 = mat(store, "ffn.w2", ffn, d)?;
        let mut zeros = |name: &str, n: usize| store.insert(format!("{prefix}.{name}"), Tensor::zeros(&[n]));
        let bq = zeros("attn.bq", d)?;
        let bv = zeros("attn.bv", d)?;
        let bo = zeros("attn.bo", d)?;
        let b1 = zeros("ffn.b1", ffn)?;
        let b2 = zeros("ffn.b2", d)?;
        Ok(EncoderLayer {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            norm1: NormIds::init(store, &format!("{prefix}.norm1"), d)?,
            w1,
            b1,
            w2,
            b2,
            norm2: NormIds::init(store, &format!("{prefix}.norm2"), d)?,
        })
    }

    /// `x` holds `batch` sequences of `seq` rows; `mask[r]` marks visible rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
        eps: f64,
    ) -> Result<Var> {
        let q = linear(g, x, p[self.wq], Some(p[self.bq]))?;
        let k = linear(g, x, p[self.wk], None)?;
        let v = linear(g, x, p[self.wv], Some(p[self.bv]))?;
        let a = g.attention(q, k, v, mask, batch, seq, heads)?;
        let o = linear(g, a, p[self.wo], Some(p[self.bo]))?;
        let r1 = g.add(x, o)?;
        let h1 = self.norm1.apply(g, p, r1, eps)?;
        let f = linear(g, h1, p[self.w1], Some(p[self.b1]))?;
        let f = g.gelu(f);
        let f = linear(g, f, p[self.w2], Some(p[self.b2]))?;
        let r2 = g.add(h1, f)?;
        self.norm2.apply(g, p, r2, eps)
    }

    /// Every parameter handle of the layer.
    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq,
            self.bq,
            self.wk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.norm1.gamma,
            self.norm1.beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.norm2.gamma,
            self.norm2.beta,
        ]
    }
}
