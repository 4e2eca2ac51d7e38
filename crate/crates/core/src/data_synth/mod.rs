//! Synthetic event-detection corpora. Each label owns a few unique trigger
//! pseudowords; the remaining words in a sentence come from a per-label
//! context pool, of which a fraction `ρ` is shared by every label. Also the
//! JSONL loader for externally prepared datasets and a bag-of-words probe
//! that measures how separable a corpus is.

mod io;
mod probe;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub use io::{load_jsonl, parse_jsonl, Dataset, LabeledText, Record, Split};
pub use probe::{classifier_separability_probe, ProbeOptions};

/// English glue words used by the description templates. Pseudowords never
/// collide with these.
const FILLER: &[&str] = &[
    "events",
    "involving",
    "an",
    "occurrence",
    "of",
    "marked",
    "by",
    "reports",
    "describe",
    "with",
    "a",
    "situation",
    "where",
    "happens",
    "near",
    "cases",
    "such",
    "as",
    "or",
    "and",
    "episode",
    "featuring",
    "amid",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub n_labels: usize,
    pub instances_per_label: usize,
    /// Upper bound on the number of distinct pseudowords.
    pub vocab_size: usize,
    pub trigger_words_per_label: usize,
    pub context_words_per_label: usize,
    /// Fraction of each label's context pool drawn from one pool shared by all labels.
    pub confusability: f64,
    /// Inclusive word-count range of a sentence, triggers included.
    pub sentence_len: [usize; 2],
    pub descriptions_per_label: usize,
    /// Share of each label's instances in the train split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_labels: 28,
            instances_per_label: 40,
            vocab_size: 2000,
            trigger_words_per_label: 4,
            context_words_per_label: 24,
            confusability: 0.5,
            sentence_len: [6, 12],
            descriptions_per_label: 5,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_labels < 2 || self.instances_per_label < 2 {
            return Err(Error::invalid("need at least 2 labels and 2 instances per label"));
        }
        if self.trigger_words_per_label == 0 || self.context_words_per_label == 0 {
            return Err(Error::invalid("trigger and context pools must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.confusability) {
            return Err(Error::invalid("confusability must lie in [0, 1]"));
        }
        let [lo, hi] = self.sentence_len;
        if lo < 3 || hi < lo {
            return Err(Error::invalid("sentence_len must be [min, max] with 3 <= min <= max"));
        }
        if self.descriptions_per_label == 0 {
            return Err(Error::invalid("descriptions_per_label must be positive"));
        }
        let train = self.train_count();
        if train == 0 || train >= self.instances_per_label {
            return Err(Error::invalid("train_fraction must leave instances in both splits"));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (self.instances_per_label as f64 * self.train_fraction).round() as usize
    }

    /// Words of each context pool taken from the shared pool.
    pub fn shared_context(&self) -> usize {
        (self.confusability * self.context_words_per_label as f64).round() as usize
    }

    fn words_needed(&self) -> usize {
        let unique = self.context_words_per_label - self.shared_context();
        self.n_labels * (self.trigger_words_per_label + unique) + self.shared_context()
    }
}

/// Label-level structure behind a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub triggers: Vec<String>,
    pub context: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: GeneratorSpec,
    pub labels: Vec<LabelSpec>,
    pub records: Vec<Record>,
    /// `(label, description)` in label order.
    pub descriptions: Vec<(String, String)>,
}

fn pseudowords(rng: &mut ChaCha8Rng) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{}{}", *c as char, *v as char)))
        .collect();
    let mut words: Vec<String> = Vec::new();
    for a in &syllables {
        for b in &syllables {
            words.push(format!("{a}{b}"));
        }
    }
    // Three-syllable words only if two-syllable ones run out.
    let mut long = Vec::new();
    for a in &syllables {
        for b in &syllables {
            for c in syllables.iter().step_by(7) {
                long.push(format!("{a}{b}{c}"));
            }
        }
    }
    words.shuffle(rng);
    long.shuffle(rng);
    words.extend(long);
    words.retain(|w| !FILLER.contains(&w.as_str()));
    words
}

/// Deterministic in `spec` (including its seed).
pub fn generate(spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    let needed = spec.words_needed();
    if needed > spec.vocab_size {
        return Err(Error::invalid(format!(
            "pools need {needed} distinct words but vocab_size is {}",
            spec.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut words = pseudowords(&mut rng).into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };

    let width = (spec.n_labels - 1).to_string().len().max(2);
    let shared = take(spec.shared_context());
    let unique = spec.context_words_per_label - shared.len();
    let labels: Vec<LabelSpec> = (0..spec.n_labels)
        .map(|i| {
            let triggers = take(spec.trigger_words_per_label);
            let mut context = shared.clone();
            context.extend(take(unique));
            LabelSpec {
                name: format!("event_{i:0width$}"),
                triggers,
                context,
            }
        })
        .collect();

    let mut records = Vec::with_capacity(spec.n_labels * spec.instances_per_label);
    let mut seen = HashSet::new();
    let train = spec.train_count();
    for label in &labels {
        for j in 0..spec.instances_per_label {
            let mut attempts = 0;
            let text = loop {
                let t = sentence(label, spec, &mut rng);
                if seen.insert(t.clone()) {
                    break t;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::invalid(format!(
                        "could not draw enough distinct sentences for {}",
                        label.name
                    )));
                }
            };
            records.push(Record {
                text,
                label: label.name.clone(),
                split: if j < train { Split::Train } else { Split::Test },
            });
        }
    }

    let mut descriptions = Vec::new();
    for label in &labels {
        for d in describe(label, spec, &mut rng)? {
            descriptions.push((label.name.clone(), d));
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        labels,
        records,
        descriptions,
    })
}

fn sentence(label: &LabelSpec, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(spec.sentence_len[0]..=spec.sentence_len[1]);
    let n_trig = rng.random_range(1..=2usize);
    let mut words: Vec<&str> = (0..len - n_trig)
        .map(|_| label.context[rng.random_range(0..label.context.len())].as_str())
        .collect();
    for _ in 0..n_trig {
        let t = &label.triggers[rng.random_range(0..label.triggers.len())];
        let at = rng.random_range(0..=words.len());
        words.insert(at, t);
    }
    words.join(" ")
}

/// Mechanical glosses: every one names some of the label's triggers, and
/// most add a couple of its label-specific context words.
fn describe(label: &LabelSpec, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    let shared = spec.shared_context();
    let own: Vec<&str> = label.context[shared..].iter().map(String::as_str).collect();
    let context_pick = |rng: &mut ChaCha8Rng| -> &str {
        if own.is_empty() {
            label.context[rng.random_range(0..label.context.len())].as_str()
        } else {
            own[rng.random_range(0..own.len())]
        }
    };
    let trig = |rng: &mut ChaCha8Rng| label.triggers[rng.random_range(0..label.triggers.len())].as_str();
    let all = label.triggers.join(" or ");
    let mut out: Vec<String> = Vec::new();
    let mut attempts = 0;
    while out.len() < spec.descriptions_per_label {
        let k = out.len() + attempts;
        let text = match k % 5 {
            0 => format!("events involving {all}"),
            1 => format!(
                "an occurrence of {} marked by {} and {}",
                trig(rng),
                context_pick(rng),
                context_pick(rng)
            ),
            2 => format!("reports describe {} with {}", trig(rng), context_pick(rng)),
            3 => format!("a situation where {} happens near {}", trig(rng), context_pick(rng)),
            _ => format!(
                "cases such as {} or {} amid {}",
                trig(rng),
                trig(rng),
                context_pick(rng)
            ),
        };
        if out.contains(&text) {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::invalid(format!(
                    "could not vary descriptions for {}",
                    label.name
                )));
            }
            continue;
        }
        out.push(text);
    }
    Ok(out)
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DESCRIPTIONS_FILE: &str = "descriptions.tsv";
pub const SPEC_FILE: &str = "spec.json";

impl Corpus {
    pub fn dataset_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn descriptions_tsv(&self) -> String {
        self.descriptions.iter().map(|(l, d)| format!("{l}\t{d}\n")).collect()
    }

    /// Writes `dataset.jsonl`, `descriptions.tsv`, and `spec.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fsutil::write_atomic(&dir.join(DATASET_FILE), self.dataset_jsonl()?.as_bytes())?;
        fsutil::write_atomic(&dir.join(DESCRIPTIONS_FILE), self.descriptions_tsv().as_bytes())?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::invalid(e.to_string()))?;
        fsutil::write_atomic(&dir.join(SPEC_FILE), format!("{spec}\n").as_bytes())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        parse_jsonl(&self.dataset_jsonl()?, "generated")
    }
}
