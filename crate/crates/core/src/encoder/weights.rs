use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, Vocab};
use crate::autodiff::Tensor;
use crate::container::WeightFile;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

/// `h = x·Wᵀ + b` with `W: [d_out×d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: gaussian(&[d_out, d_in], rng),
            bias: Tensor::param(vec![0.0; d_out], &[d_out]).expect("shape"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.weight)?.add_row(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::param(vec![1.0; d], &[d]).expect("shape"),
            bias: Tensor::param(vec![0.0; d], &[d]).expect("shape"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub attn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: Norm,
}

/// Everything the frozen base model needs, vocabulary included.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_norm: Norm,
    pub layers: Vec<LayerWeights>,
    frozen: bool,
}

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| normal.sample(rng)).collect(), shape).expect("shape")
}

impl EncoderWeights {
    /// Gaussian(0, 0.02²) matrices, zero biases, unit gains. Draw order:
    /// token table, position table, then per layer q, k, v, o, ffn_in, ffn_out.
    pub fn init(config: &EncoderConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self> {
        let mut config = config.clone();
        config.vocab_size = vocab.len();
        config.validate()?;
        let (d, f) = (config.model_dim, config.ffn_dim);
        let token_emb = gaussian(&[vocab.len(), d], rng);
        let pos_emb = gaussian(&[config.max_seq_len, d], rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                q: Linear::init(d, d, rng),
                k: Linear::init(d, d, rng),
                v: Linear::init(d, d, rng),
                o: Linear::init(d, d, rng),
                attn_norm: Norm::init(d),
                ffn_in: Linear::init(f, d, rng),
                ffn_out: Linear::init(d, f, rng),
                ffn_norm: Norm::init(d),
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            token_emb,
            pos_emb,
            emb_norm: Norm::init(d),
            layers,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Detaches every tensor so no optimizer can move it again.
    pub fn freeze(&mut self) {
        if self.frozen {
            return;
        }
        let frozen = self.map_tensors(|t| t.deep_copy(false));
        *self = Self { frozen: true, ..frozen };
    }

    fn map_tensors(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        let lin = |l: &Linear| Linear {
            weight: f(&l.weight),
            bias: f(&l.bias),
        };
        let norm = |n: &Norm| Norm {
            gain: f(&n.gain),
            bias: f(&n.bias),
        };
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            token_emb: f(&self.token_emb),
            pos_emb: f(&self.pos_emb),
            emb_norm: norm(&self.emb_norm),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    q: lin(&l.q),
                    k: lin(&l.k),
                    v: lin(&l.v),
                    o: lin(&l.o),
                    attn_norm: norm(&l.attn_norm),
                    ffn_in: lin(&l.ffn_in),
                    ffn_out: lin(&l.ffn_out),
                    ffn_norm: norm(&l.ffn_norm),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Independent copy whose tensors share no buffers with `self`.
    pub fn deep_copy(&self) -> Self {
        let rg = !self.frozen;
        self.map_tensors(|t| t.deep_copy(rg))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("emb.token".to_string(), self.token_emb.clone()),
            ("emb.pos".to_string(), self.pos_emb.clone()),
            ("emb.norm.gain".to_string(), self.emb_norm.gain.clone()),
            ("emb.norm.bias".to_string(), self.emb_norm.bias.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, lin) in [
                ("q", &l.q),
                ("k", &l.k),
                ("v", &l.v),
                ("o", &l.o),
                ("ffn_in", &l.ffn_in),
                ("ffn_out", &l.ffn_out),
            ] {
                out.push((format!("layer.{i}.{name}.weight"), lin.weight.clone()));
                out.push((format!("layer.{i}.{name}.bias"), lin.bias.clone()));
            }
            for (name, n) in [("attn_norm", &l.attn_norm), ("ffn_norm", &l.ffn_norm)] {
                out.push((format!("layer.{i}.{name}.gain"), n.gain.clone()));
                out.push((format!("layer.{i}.{name}.bias"), n.bias.clone()));
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let mut file = WeightFile::new();
        let meta = &mut file.metadata;
        meta.insert("kind".into(), "encoder".into());
        meta.insert(
            "config".into(),
            serde_json::to_value(&self.config).map_err(|e| Error::Container(e.to_string()))?,
        );
        meta.insert("vocab".into(), self.vocab.tokens().into());
        meta.insert("frozen".into(), self.frozen.into());
        for (name, t) in self.named_tensors() {
            file.push(name, &t)?;
        }
        Ok(file)
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let meta = |key: &str| {
            file.metadata
                .get(key)
                .ok_or_else(|| Error::Container(format!("metadata key {key:?} missing")))
        };
        if meta("kind")?.as_str() != Some("encoder") {
            return Err(Error::Container("not an encoder weights file".into()));
        }
        let config: EncoderConfig =
            serde_json::from_value(meta("config")?.clone()).map_err(|e| Error::Container(format!("config: {e}")))?;
        config.validate()?;
        let tokens: Vec<String> =
            serde_json::from_value(meta("vocab")?.clone()).map_err(|e| Error::Container(format!("vocab: {e}")))?;
        let vocab = Vocab::from_tokens(tokens)?;
        let frozen = meta("frozen")?
            .as_bool()
            .ok_or_else(|| Error::Container("frozen must be a boolean".into()))?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Container(format!(
                "vocab has {} entries but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        // Build a template with the right shapes, then fill every slot by name.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::init(&config, vocab, &mut rng)?;
        let expected = template.named_tensors();
        if expected.len() != file.len() {
            return Err(Error::Container(format!(
                "expected {} tensors, file has {}",
                expected.len(),
                file.len()
            )));
        }
        for (name, slot) in &expected {
            let t = file.tensor(name, slot.shape(), false)?;
            slot.values_mut().copy_from_slice(&t.values());
        }
        let mut w = template.map_tensors(|t| t.deep_copy(!frozen));
        w.frozen = frozen;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }

    /// SHA-256 over the serialized weights, ignoring the frozen flag.
    pub fn fingerprint(&self) -> Result<String> {
        let mut file = self.to_weight_file()?;
        file.metadata.remove("frozen");
        Ok(hex::encode(Sha256::digest(file.to_bytes()?)))
    }
}
