//! Word-level tokenisation, vocabulary and the trainable text encoder used
//! both for query/knowledge features and for the query–knowledge scorer.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, RowRef, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, NormIds, EMBED_STD};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercases, splits on whitespace and trims non-alphanumeric characters
/// from both ends of every piece. Empty pieces are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `corpus`, keeps those seen at least `min_count`
    /// times and orders them by descending count, then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for t in tokenize(text.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect())
    }

    /// Vocabulary whose non-reserved ids follow the order of `tokens`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {t:?}")));
            }
            if RESERVED_TOKENS.contains(&t.as_str()) {
                return Err(Error::invalid(format!("reserved token {t} listed in vocabulary")));
            }
            if index.insert(t.clone(), i + NUM_RESERVED).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < NUM_RESERVED {
            Some(RESERVED_TOKENS[id])
        } else {
            self.tokens.get(id - NUM_RESERVED).map(String::as_str)
        }
    }

    /// Tokenises `text` and maps every token to its id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `i` holds id `i + 5`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Fixed-length id sequence with its padding mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// `true` exactly on non-[PAD] positions.
    pub mask: Vec<bool>,
    /// Number of real tokens after truncation.
    pub true_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Truncates `ids` to its first `target_len` entries or pads with [`PAD`].
pub fn pad_truncate(ids: &[usize], target_len: usize) -> Result<TokenSequence> {
    if target_len == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    let n = ids.len().min(target_len);
    let mut out = ids[..n].to_vec();
    out.resize(target_len, PAD);
    let mut mask = vec![true; n];
    mask.resize(target_len, false);
    Ok(TokenSequence {
        ids: out,
        mask,
        true_length: n,
    })
}

/// Handles of the text encoder's parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embed_norm: NormIds,
    pub layers: Vec<EncoderLayer>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub heads: usize,
    pub eps: f64,
}

/// Output of [`TextEncoder::forward`] for a batch of equal-length sequences.
#[derive(Clone, Debug)]
pub struct TextOutput {
    /// `[batch·len × d]`.
    pub features: Var,
    /// `[batch × d]`, mask-weighted mean of `features`.
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        d: usize,
        max_len: usize,
        layers: usize,
        heads: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let token_embedding = store.insert(
            format!("{prefix}.token_embedding"),
            Tensor::randn(&[vocab_size, d], EMBED_STD, rng),
        )?;
        let position_embedding = store.insert(
            format!("{prefix}.position_embedding"),
            Tensor::randn(&[max_len, d], EMBED_STD, rng),
        )?;
        let embed_norm = NormIds::init(store, &format!("{prefix}.embed_norm"), d)?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::init(store, &format!("{prefix}.layer{i}"), d, 4 * d, rng))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            token_embedding,
            position_embedding,
            embed_norm,
            layers,
            vocab_size,
            max_len,
            heads,
            eps,
        })
    }

    /// Encodes equal-length sequences stacked into one batch.
    pub fn forward(&self, g: &mut Graph, p: &Bound, seqs: &[&TokenSequence]) -> Result<TextOutput> {
        let len = match seqs.first() {
            Some(s) => s.len(),
            None => return Err(Error::invalid("text encoder needs at least one sequence")),
        };
        if len > self.max_len {
            return Err(Error::shape(
                "encode_text",
                format!("sequence of {len} exceeds {} positions", self.max_len),
            ));
        }
        let mut tok: Vec<RowRef> = Vec::with_capacity(seqs.len() * len);
        let mut pos: Vec<RowRef> = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() != len || s.mask.len() != len {
                return Err(Error::shape("encode_text", "sequences in a batch differ in length"));
            }
            for (i, (&id, &m)) in s.ids.iter().zip(&s.mask).enumerate() {
                if id >= self.vocab_size {
                    return Err(Error::invalid(format!(
                        "token id {id} out of range for vocabulary of {}",
                        self.vocab_size
                    )));
                }
                tok.push(Some((0, id)));
                pos.push(Some((0, i)));
                mask.push(m);
            }
        }
        let te = g.gather_rows(&[p[self.token_embedding]], &tok)?;
        let pe = g.gather_rows(&[p[self.position_embedding]], &pos)?;
        let x = g.add(te, pe)?;
        let mut x = self.embed_norm.apply(g, p, x, self.eps)?;
        for layer in &self.layers {
            x = layer.forward(g, p, x, &mask, seqs.len(), len, self.heads, self.eps)?;
        }
        let pooled = g.masked_mean_pool(x, &mask, seqs.len(), len)?;
        Ok(TextOutput {
            features: x,
            pooled,
            mask,
            len,
        })
    }

    /// Features `[len × d]` and pooled vector of a single sequence.
    pub fn encode(&self, params: &ParamStore, seq: &TokenSequence) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let out = self.forward(&mut g, &p, &[seq])?;
        Ok((g.tensor(out.features), g.value(out.pooled).to_vec()))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.token_embedding,
            self.position_embedding,
            self.embed_norm.gamma,
            self.embed_norm.beta,
        ];
        for l in &self.layers {
            ids.extend(l.ids());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("A lady wearing a blue t-shirt"),
            ["a", "lady", "wearing", "a", "blue", "t-shirt"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Häagen-Dazs!"), ["häagen-dazs"]);
        assert_eq!(tokenize("  (hello),  ...  world.  "), ["hello", "world"]);
    }

    #[test]
    fn vocabulary_counting() {
        let v = Vocabulary::build(&["a b", "b c"], 1).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.tokens(), ["b", "a", "c"]);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
        let v2 = Vocabulary::build(&["a b", "b c"], 2).unwrap();
        assert_eq!(v2.tokens(), ["b"]);
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_reserved() {
        assert!(Vocabulary::from_tokens(vec!["x".into(), "x".into()]).is_err());
        assert!(Vocabulary::from_tokens(vec!["[MASK]".into()]).is_err());
    }

    #[test]
    fn pad_truncate_examples() {
        let ids: Vec<usize> = (10..55).collect();
        let s = pad_truncate(&ids, 40).unwrap();
        assert_eq!(s.ids, ids[..40]);
        assert_eq!(s.true_length, 40);
        let ids: Vec<usize> = (10..80).collect();
        let s = pad_truncate(&ids, 80).unwrap();
        assert_eq!(s.ids[70..], [PAD; 10]);
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 70);
        let s = pad_truncate(&[], 5).unwrap();
        assert_eq!(s.ids, [PAD; 5]);
        assert!(s.mask.iter().all(|&m| !m));
        assert!(pad_truncate(&[1], 0).is_err());
    }

    fn encoder(vocab: usize) -> (ParamStore, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = TextEncoder::init(&mut store, "text", vocab, 8, 10, 2, 2, 1e-5, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn all_pad_pools_to_zero_and_shape_holds() {
        let (store, enc) = encoder(20);
        let seq = pad_truncate(&[], 6).unwrap();
        let (feats, pooled) = enc.encode(&store, &seq).unwrap();
        assert_eq!(feats.shape(), [6, 8]);
        assert!(pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_embeddings_break_permutation_symmetry() {
        let (store, enc) = encoder(20);
        let a = pad_truncate(&[7, 9, 11], 6).unwrap();
        let b = pad_truncate(&[9, 7, 11], 6).unwrap();
        let (fa, _) = enc.encode(&store, &a).unwrap();
        let (fb, _) = enc.encode(&store, &b).unwrap();
        assert_ne!(fa.data(), fb.data());
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let (store, enc) = encoder(20);
        let s = pad_truncate(&[25], 4).unwrap();
        assert!(enc.encode(&store, &s).is_err());
    }
}
