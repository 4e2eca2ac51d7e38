//! Label descriptions: a TSV loader, the bank of description vectors encoded
//! once by the frozen base encoder, seeded subsetting, and the prompt template
//! for producing descriptions with an external model.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::encoder::{encode_base, tokenize, EncoderWeights};
use crate::error::{Error, Result};
use crate::fsutil;

const PROMPT_TEMPLATE: &str = include_str!("../../assets/prompt_label_description.txt");

/// Label name to its descriptions, in file order.
pub type RawDescriptions = BTreeMap<String, Vec<String>>;

/// Parses `label<TAB>description` lines. Blank lines are skipped; repeated
/// `(label, description)` pairs are dropped with a warning. When `known` is
/// given, every label must be in it.
pub fn parse_descriptions(text: &str, source: &str, known: Option<&HashSet<String>>) -> Result<RawDescriptions> {
    let mut out = RawDescriptions::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            msg,
        };
        let (label, desc) = line
            .split_once('\t')
            .ok_or_else(|| err("expected label<TAB>description".into()))?;
        let (label, desc) = (label.trim(), desc.trim());
        if label.is_empty() || desc.is_empty() {
            return Err(err("empty label or description".into()));
        }
        if desc.contains('\t') {
            return Err(err("more than one tab".into()));
        }
        if known.is_some_and(|k| !k.contains(label)) {
            return Err(err(format!("unknown label {label:?}")));
        }
        let entry = out.entry(label.to_string()).or_default();
        if entry.iter().any(|d| d == desc) {
            log::warn!("{source}:{line_no}: duplicate description for {label:?} dropped");
            continue;
        }
        entry.push(desc.to_string());
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 0,
            msg: "no descriptions found".into(),
        });
    }
    Ok(out)
}

pub fn load_descriptions(path: &Path, known: Option<&HashSet<String>>) -> Result<RawDescriptions> {
    parse_descriptions(&fsutil::read_to_string(path)?, &path.display().to_string(), known)
}

/// Per-label description texts and their frozen `[CLS]` vectors.
#[derive(Debug, Clone)]
pub struct DescriptionBank {
    texts: BTreeMap<usize, Vec<String>>,
    /// `[n_y×d]` per label, constants.
    anchors: BTreeMap<usize, Tensor>,
    fingerprint: String,
}

/// Encodes every description once. `label_ids` maps label names to global ids;
/// names it does not know are an error.
pub fn encode_bank(
    raw: &RawDescriptions,
    label_ids: &BTreeMap<String, usize>,
    weights: &EncoderWeights,
) -> Result<DescriptionBank> {
    if !weights.is_frozen() {
        return Err(Error::invalid("descriptions must be encoded by a frozen encoder"));
    }
    let max_len = weights.config.max_seq_len;
    let mut texts = BTreeMap::new();
    let mut anchors = BTreeMap::new();
    for (name, descs) in raw {
        let id = *label_ids
            .get(name)
            .ok_or_else(|| Error::invalid(format!("description for unknown label {name:?}")))?;
        let mut rows = Vec::with_capacity(descs.len() * weights.config.model_dim);
        for desc in descs {
            let t = tokenize(desc, &weights.vocab, max_len)?;
            if t.truncated {
                log::warn!("description for {name:?} truncated to {max_len} tokens");
            }
            rows.extend(encode_base(&t.ids, &t.mask, weights)?.cls.to_vec());
        }
        anchors.insert(id, Tensor::new(rows, &[descs.len(), weights.config.model_dim])?);
        texts.insert(id, descs.clone());
    }
    Ok(DescriptionBank {
        texts,
        anchors,
        fingerprint: weights.fingerprint()?,
    })
}

impl DescriptionBank {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn anchors(&self) -> &BTreeMap<usize, Tensor> {
        &self.anchors
    }

    pub fn texts(&self, label: usize) -> Option<&[String]> {
        self.texts.get(&label).map(Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.texts.keys().copied()
    }

    pub fn count(&self, label: usize) -> usize {
        self.texts.get(&label).map_or(0, Vec::len)
    }

    /// Fails unless this bank was encoded by exactly `weights`.
    pub fn ensure_encoder(&self, weights: &EncoderWeights) -> Result<()> {
        let active = weights.fingerprint()?;
        if active != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                bank: self.fingerprint.clone(),
                encoder: active,
            });
        }
        Ok(())
    }

    /// Fails unless every label in `labels` has at least one description.
    pub fn ensure_covers(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|l| self.count(**l) == 0) {
            Some(l) => Err(Error::invalid(format!("label {l} has no descriptions"))),
            None => Ok(()),
        }
    }
}

/// Exactly `n` descriptions per label, sampled uniformly without replacement
/// and kept in their original order. Labels are visited in id order.
pub fn subset_bank(bank: &DescriptionBank, n: usize, seed: u64) -> Result<DescriptionBank> {
    if n == 0 {
        return Err(Error::invalid("n_descriptions must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = BTreeMap::new();
    let mut anchors = BTreeMap::new();
    for (&label, descs) in &bank.texts {
        if descs.len() < n {
            return Err(Error::invalid(format!(
                "label {label} has {} descriptions, {n} requested",
                descs.len()
            )));
        }
        let mut idx = rand::seq::index::sample(&mut rng, descs.len(), n).into_vec();
        idx.sort_unstable();
        let z = &bank.anchors[&label];
        let d = z.shape()[1];
        let rows: Vec<f64> = idx
            .iter()
            .flat_map(|&i| z.values()[i * d..(i + 1) * d].to_vec())
            .collect();
        anchors.insert(label, Tensor::new(rows, &[n, d])?);
        texts.insert(label, idx.iter().map(|&i| descs[i].clone()).collect());
    }
    Ok(DescriptionBank {
        texts,
        anchors,
        fingerprint: bank.fingerprint.clone(),
    })
}

/// The description-generation prompt for one label, asking for `n` descriptions.
pub fn export_prompt_template(event_label: &str, n: usize) -> String {
    let event = event_label.replace('_', " ");
    PROMPT_TEMPLATE
        .replace("{event}", &event)
        .replace("{k}", &n.to_string())
        .replace("{n}", &n.to_string())
}

#[cfg(test)]
mod tests;
