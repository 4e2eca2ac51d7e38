use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::weights::EncoderWeights;
use super::{Adapter, EncoderConfig, Vocab};
use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseExample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    /// Dense label in `0..num_labels`.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for BaseTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mean cross-entropy of `logits: [B×C]` against dense gold ids.
pub(crate) fn cross_entropy(logits: &Tensor, gold: &[usize]) -> Result<Tensor> {
    let c = logits.shape()[1];
    let flat: Vec<usize> = gold.iter().enumerate().map(|(i, y)| i * c + y).collect();
    Ok(logits.log_softmax(1)?.gather(&flat)?.mean().neg())
}

/// Trains a fresh encoder plus a throwaway linear head on the base task and
/// returns the frozen encoder. Draw order: encoder init, head init, then one
/// shuffle per epoch.
pub fn train_base_task(
    config: &EncoderConfig,
    vocab: Vocab,
    data: &[BaseExample],
    num_labels: usize,
    opts: &BaseTrainOptions,
    rng: &mut impl Rng,
) -> Result<(EncoderWeights, BaseTrainReport)> {
    let weights = EncoderWeights::init(config, vocab, rng)?;
    fine_tune_base(weights, data, num_labels, opts, rng)
}

/// Base-task fine-tuning of existing, unfrozen weights, then freezing.
pub fn fine_tune_base(
    mut weights: EncoderWeights,
    data: &[BaseExample],
    num_labels: usize,
    opts: &BaseTrainOptions,
    rng: &mut impl Rng,
) -> Result<(EncoderWeights, BaseTrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("base task has no training data"));
    }
    if num_labels < 2 || data.iter().any(|e| e.label >= num_labels) {
        return Err(Error::invalid("base task needs >= 2 labels and in-range gold ids"));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be positive"));
    }
    if weights.is_frozen() {
        return Err(Error::invalid("base fine-tuning needs unfrozen weights"));
    }
    let d = weights.config.model_dim;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let head_w = Tensor::param(
        (0..num_labels * d).map(|_| normal.sample(rng)).collect(),
        &[num_labels, d],
    )?;
    let head_b = Tensor::param(vec![0.0; num_labels], &[num_labels])?;

    let mut params = weights.parameters();
    params.push(head_w.clone());
    params.push(head_b.clone());
    let mut adam = AdamState::new(&params, opts.adam);

    let logits_for = |w: &EncoderWeights, batch: &[&BaseExample]| -> Result<Tensor> {
        let cls = batch
            .iter()
            .map(|e| Ok(w.forward(&e.ids, &e.mask, Adapter::Base, None)?.encoding.cls))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&cls)?.matmul_t(&head_w)?.add_row(&head_b)
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&BaseExample> = chunk.iter().map(|&i| &data[i]).collect();
            let gold: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let loss = cross_entropy(&logits_for(&weights, &batch)?, &gold)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    op: "base training loss",
                });
            }
            loss.backward()?;
            adam.step(&params);
            total += loss.item() * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        log::info!("base epoch {}: loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }

    let mut correct = 0;
    for chunk in data.chunks(64) {
        let batch: Vec<&BaseExample> = chunk.iter().collect();
        let logits = logits_for(&weights, &batch)?;
        let c = num_labels;
        let v = logits.values();
        for (i, e) in batch.iter().enumerate() {
            let row = &v[i * c..(i + 1) * c];
            let pred = argmax(row);
            correct += usize::from(pred == e.label);
        }
    }
    weights.freeze();
    Ok((
        weights,
        BaseTrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / data.len() as f64,
        },
    ))
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskedLmOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Chance that a non-`[CLS]` token is hidden; at least one per sentence always is.
    pub mask_prob: f64,
    pub adam: AdamConfig,
}

impl Default for MaskedLmOptions {
    fn default() -> Self {
        Self {
            epochs: 0,
            batch_size: 16,
            mask_prob: 0.15,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Unlabeled masked-token pretraining. Hidden tokens are replaced by `[UNK]`
/// and predicted from the final token states through the tied embedding
/// table. Returns the mean loss of each epoch.
pub fn pretrain_masked(
    weights: &EncoderWeights,
    sentences: &[(Vec<usize>, Vec<bool>)],
    opts: &MaskedLmOptions,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if weights.is_frozen() {
        return Err(Error::invalid("masked pretraining needs unfrozen weights"));
    }
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    if opts.batch_size == 0 || !(0.0..=1.0).contains(&opts.mask_prob) {
        return Err(Error::invalid(
            "masked pretraining needs batch_size >= 1 and mask_prob in [0, 1]",
        ));
    }
    let usable: Vec<&(Vec<usize>, Vec<bool>)> = sentences
        .iter()
        .filter(|(_, m)| m.iter().filter(|x| **x).count() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "masked pretraining needs sentences with at least one word",
        ));
    }
    let v = weights.config.vocab_size;
    let out_bias = Tensor::param(vec![0.0; v], &[v])?;
    let mut params = weights.parameters();
    params.push(out_bias.clone());
    let mut adam = AdamState::new(&params, opts.adam);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0);
        for chunk in order.chunks(opts.batch_size) {
            let mut states = Vec::new();
            let mut gold = Vec::new();
            for &i in chunk {
                let (ids, mask) = usable[i];
                let n = mask.iter().filter(|x| **x).count();
                let mut hidden: Vec<usize> = (1..n).filter(|_| rng.random::<f64>() < opts.mask_prob).collect();
                if hidden.is_empty() {
                    hidden.push(rng.random_range(1..n));
                }
                let mut corrupted = ids.clone();
                for &p in &hidden {
                    corrupted[p] = super::UNK;
                    gold.push(ids[p]);
                }
                let enc = weights.forward(&corrupted, mask, Adapter::Base, None)?;
                states.push(enc.encoding.token_states.gather_rows(&hidden)?);
            }
            let rows = concat_rows(&states)?;
            let logits = rows.matmul_t(&weights.token_emb)?.add_row(&out_bias)?;
            let loss = cross_entropy(&logits, &gold)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    op: "masked pretraining loss",
                });
            }
            loss.backward()?;
            adam.step(&params);
            total += loss.item() * gold.len() as f64;
            count += gold.len();
        }
        let mean = total / count as f64;
        log::info!("masked pretraining epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// Stacks `[n_i×d]` blocks into one `[Σn_i×d]` tensor.
fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let rows: Vec<Tensor> = parts
        .iter()
        .flat_map(|p| (0..p.shape()[0]).map(move |i| p.row(i)))
        .collect::<Result<_>>()?;
    Tensor::stack(&rows)
}
