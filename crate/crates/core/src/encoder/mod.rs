//! The small transformer encoder standing in for a pre-trained BERT:
//! whitespace tokenization, learned token and position embeddings, post-LN
//! blocks whose attention projections can host expert pools, and `[CLS]`
//! pooling from the raw final hidden state.

mod forward;
mod train;
mod weights;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{encode_base, encode_with_experts, Adapter, EmbeddingNoise, Encoded, SentenceEncoding};
pub(crate) use train::argmax;
pub use train::{
    fine_tune_base, pretrain_masked, train_base_task, BaseExample, BaseTrainOptions, BaseTrainReport, MaskedLmOptions,
};
pub use weights::{EncoderWeights, LayerWeights, Linear, Norm};

pub const CLS: usize = 0;
pub const PAD: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 24,
            vocab_size: 2048,
            layernorm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("encoder {name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must leave room for [CLS] and a token"));
        }
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::invalid("vocab_size must exceed the reserved ids"));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return Err(Error::invalid("layernorm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Lowercased whitespace tokens with leading/trailing ASCII punctuation removed.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token to id map. Ids 0..3 are `[CLS]`, `[PAD]`, `[UNK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Every distinct normalized token of `texts`, in sorted order after the
    /// reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("built vocab is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::invalid("vocab must start with [CLS], [PAD], [UNK]"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Words were dropped to fit `max_len`.
    pub truncated: bool,
}

impl Tokenized {
    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// `[CLS]` followed by the text's tokens, padded or truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Tokenized> {
    if max_len < 2 {
        return Err(Error::invalid("max_len must be at least 2"));
    }
    let words = normalize(text);
    if words.is_empty() {
        return Err(Error::invalid("cannot tokenize empty text"));
    }
    let keep = words.len().min(max_len - 1);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(words[..keep].iter().map(|w| vocab.id(w)));
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, false);
    Ok(Tokenized {
        ids,
        mask,
        truncated: keep < words.len(),
    })
}
