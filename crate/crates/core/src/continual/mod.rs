//! The continual protocol: disjoint-label task streams, the one-exemplar-per-
//! class memory, embedding-jitter augmentation, frozen snapshots of the
//! previous task's model, the per-task training loop, and the experiment
//! driver that fills the per-task metric matrix.

mod learner;
mod output;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::{Dataset, Split};
use crate::encoder::{tokenize, EmbeddingNoise, Vocab};
use crate::error::{Error, Result};

pub use learner::{
    run_experiment, Augmentation, Learner, LossRow, Model, Prepared, ProtocolChecks, RunResult, Snapshot, TaskReport,
    TrainConfig,
};
pub use output::{losses_csv, write_run_outputs, CHECKPOINT_DIR, LOSSES_FILE, MATRIX_FILE, METRICS_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Current,
    Memory,
    Augmented,
}

/// A tokenized, labeled sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub text: String,
    pub label: usize,
    /// Task that introduced `label`, 0-based.
    pub task_index: usize,
    pub source: Source,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Embedding jitter applied on every forward of this instance.
    pub noise: Option<EmbeddingNoise>,
}

impl Instance {
    pub fn new(text: &str, label: usize, task_index: usize, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let t = tokenize(text, vocab, max_len)?;
        Ok(Self {
            text: text.to_string(),
            label,
            task_index,
            source: Source::Current,
            ids: t.ids,
            mask: t.mask,
            noise: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub labels: Vec<usize>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub n_way: usize,
    pub k_shot: usize,
}

impl TaskStream {
    /// Disjoint label sets, `N·K` training instances per task, test sets
    /// drawn only from each task's labels.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if task.labels.len() != self.n_way {
                return Err(Error::invalid(format!("task {t} has {} labels", task.labels.len())));
            }
            for l in &task.labels {
                if !seen.insert(*l) {
                    return Err(Error::invalid(format!("label {l} appears in two tasks")));
                }
            }
            if task.train.len() != self.n_way * self.k_shot {
                return Err(Error::invalid(format!(
                    "task {t} has {} training instances",
                    task.train.len()
                )));
            }
            let own = |i: &Instance| task.labels.contains(&i.label) && i.task_index == t;
            if !task.train.iter().all(own) || !task.test.iter().all(own) {
                return Err(Error::invalid(format!("task {t} holds instances of foreign labels")));
            }
        }
        Ok(())
    }

    /// Labels of tasks `0..=t`, in task order.
    pub fn seen_labels(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flat_map(|k| k.labels.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub num_tasks: usize,
}

impl Default for StreamShape {
    fn default() -> Self {
        Self {
            n_way: 4,
            k_shot: 5,
            num_tasks: 5,
        }
    }
}

/// Seeded partition of `candidates` into `T` tasks of `N` labels. Each label
/// contributes `K` shuffled train-split instances; its test split is the test set.
pub fn build_stream(
    dataset: &Dataset,
    candidates: &[usize],
    shape: StreamShape,
    seed: u64,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TaskStream> {
    let StreamShape {
        n_way,
        k_shot,
        num_tasks,
    } = shape;
    if n_way == 0 || k_shot == 0 || num_tasks == 0 {
        return Err(Error::invalid("stream shape entries must be positive"));
    }
    let mut labels: Vec<usize> = candidates.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let need = n_way * num_tasks;
    if labels.len() < need {
        return Err(Error::invalid(format!(
            "stream needs {need} labels ({num_tasks} tasks x {n_way}-way), only {} available",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let mut tasks = Vec::with_capacity(num_tasks);
    for (t, group) in labels[..need].chunks(n_way).enumerate() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &label in group {
            let mut pool: Vec<_> = dataset.split(Split::Train).filter(|i| i.label == label).collect();
            let held: Vec<_> = dataset.split(Split::Test).filter(|i| i.label == label).collect();
            if pool.len() < k_shot || held.is_empty() {
                return Err(Error::invalid(format!(
                    "label {} has {} train and {} test instances; need {k_shot} and 1",
                    dataset.label_names.get(label).map_or("?", String::as_str),
                    pool.len(),
                    held.len()
                )));
            }
            pool.shuffle(&mut rng);
            for i in &pool[..k_shot] {
                train.push(Instance::new(&i.text, label, t, vocab, max_len)?);
            }
            for i in held {
                test.push(Instance::new(&i.text, label, t, vocab, max_len)?);
            }
        }
        let mut sorted = group.to_vec();
        sorted.sort_unstable();
        tasks.push(TaskSpec {
            labels: sorted,
            train,
            test,
        });
    }
    let stream = TaskStream { tasks, n_way, k_shot };
    stream.validate()?;
    Ok(stream)
}

/// One stored exemplar per seen label. Entries are never replaced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBuffer {
    entries: BTreeMap<usize, Instance>,
}

impl MemoryBuffer {
    pub fn insert(&mut self, mut inst: Instance) -> Result<()> {
        if self.entries.contains_key(&inst.label) {
            return Err(Error::invalid(format!("label {} already has an exemplar", inst.label)));
        }
        inst.source = Source::Memory;
        inst.noise = None;
        self.entries.insert(inst.label, inst);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: usize) -> Option<&Instance> {
        self.entries.get(&label)
    }

    /// In label order.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.entries.values()
    }
}

/// Index of the feature row closest, by cosine, to the mean of all rows.
/// Ties go to the earlier row.
pub fn select_exemplar(features: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = features.first() else {
        return Err(Error::invalid("cannot pick an exemplar from an empty group"));
    };
    let d = first.len();
    let mut mean = vec![0.0; d];
    for f in features {
        if f.len() != d {
            return Err(Error::invalid("exemplar features differ in length"));
        }
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / features.len() as f64;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nm = norm(&mean).max(crate::autodiff::EPS_NORM);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, f) in features.iter().enumerate() {
        let cos = f.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() / (norm(f).max(crate::autodiff::EPS_NORM) * nm);
        if cos > best.1 {
            best = (i, cos);
        }
    }
    Ok(best.0)
}

/// `copies` jittered variants of every memory exemplar. The noise seed of
/// each variant is fixed by `(seed, label, copy)`.
pub fn augment_memory(buffer: &MemoryBuffer, sigma: f64, copies: usize, seed: u64) -> Vec<Instance> {
    let mut out = Vec::with_capacity(buffer.len() * copies);
    for inst in buffer.instances() {
        for c in 0..copies {
            let mut aug = inst.clone();
            aug.source = Source::Augmented;
            let mix = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((inst.label as u64) << 20)
                .wrapping_add(c as u64);
            aug.noise = Some(EmbeddingNoise { sigma, seed: mix });
            out.push(aug);
        }
    }
    out
}
