//! Training objectives: cross-entropy on the detector, the label-description
//! contrastive term, feature and prediction distillation against the previous
//! task's snapshot, and their weighted sum. Every term is a batch mean.

mod head;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use head::DetectorHead;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_router: f64,
    pub alpha_label: f64,
    pub alpha_fd: f64,
    pub alpha_pd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_router: 0.01,
            alpha_label: 0.1,
            alpha_fd: 1.0,
            alpha_pd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha_router: 0.0,
            alpha_label: 0.0,
            alpha_fd: 0.0,
            alpha_pd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_router", self.alpha_router),
            ("alpha_label", self.alpha_label),
            ("alpha_fd", self.alpha_fd),
            ("alpha_pd", self.alpha_pd),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(Error::invalid(format!("{name} = {v} must be finite and >= 0"))),
            None => Ok(()),
        }
    }
}

/// Per-step loss values, for `losses.csv`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub router: f64,
    pub label: f64,
    pub fd: f64,
    pub pd: f64,
    pub total: f64,
}

/// Mean of `−log softmax(head(f))[gold]`.
pub fn ce_loss(head: &DetectorHead, features: &Tensor, gold: &[usize]) -> Result<Tensor> {
    ce_from_logits(&head.logits(features)?, head, gold)
}

pub fn ce_from_logits(logits: &Tensor, head: &DetectorHead, gold: &[usize]) -> Result<Tensor> {
    let c = head.num_classes();
    if logits.shape() != [gold.len(), c] {
        return Err(Error::Shape {
            op: "ce_loss",
            left: logits.shape().to_vec(),
            right: vec![gold.len(), c],
        });
    }
    let flat = gold
        .iter()
        .enumerate()
        .map(|(i, y)| {
            head.row_of(*y)
                .map(|r| i * c + r)
                .ok_or_else(|| Error::invalid(format!("gold label {y} has no detector row")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(logits.log_softmax(1)?.gather(&flat)?.mean().neg())
}

/// Which descriptions the contrastive denominator ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveVariant {
    /// Only the other labels' descriptions; the loss can go negative.
    #[default]
    Printed,
    /// Every seen label's descriptions, gold included.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveOptions {
    pub variant: ContrastiveVariant,
    /// Divide dot products by `√d`.
    pub scale_by_sqrt_dim: bool,
}

/// `−log [Σ_{z∈Z_y} exp(f·z) / Σ_{y'≠y} Σ_{z'∈Z_y'} exp(f·z')]`, batch mean.
/// `anchors` maps each label to its `[n_y×d]` description matrix; only labels
/// in `seen` take part.
pub fn label_contrastive_loss(
    features: &Tensor,
    gold: &[usize],
    anchors: &BTreeMap<usize, Tensor>,
    seen: &[usize],
    opts: ContrastiveOptions,
) -> Result<Tensor> {
    if seen.len() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two seen labels"));
    }
    if features.shape().len() != 2 || features.shape()[0] != gold.len() || gold.is_empty() {
        return Err(Error::Shape {
            op: "label_contrastive_loss",
            left: features.shape().to_vec(),
            right: vec![gold.len()],
        });
    }
    let d = features.shape()[1];
    let mut rows = Vec::new();
    let mut ranges = BTreeMap::new();
    for &y in seen {
        let z = anchors
            .get(&y)
            .ok_or_else(|| Error::invalid(format!("label {y} has no description vectors")))?;
        if z.shape().len() != 2 || z.shape()[1] != d || z.shape()[0] == 0 {
            return Err(Error::Shape {
                op: "label_contrastive_loss",
                left: z.shape().to_vec(),
                right: vec![d],
            });
        }
        let start = rows.len() / d;
        rows.extend_from_slice(&z.values());
        ranges.insert(y, start..start + z.shape()[0]);
    }
    let total = rows.len() / d;
    let bank = Tensor::new(rows, &[total, d])?;
    let mut sims = features.matmul_t(&bank)?;
    if opts.scale_by_sqrt_dim {
        sims = sims.scale(1.0 / (d as f64).sqrt());
    }
    let mut per = Vec::with_capacity(gold.len());
    for (i, y) in gold.iter().enumerate() {
        let pos = ranges
            .get(y)
            .ok_or_else(|| Error::invalid(format!("gold label {y} is not among the seen labels")))?;
        let base = i * total;
        let num: Vec<usize> = pos.clone().map(|j| base + j).collect();
        let den: Vec<usize> = match opts.variant {
            ContrastiveVariant::Printed => (0..total).filter(|j| !pos.contains(j)).map(|j| base + j).collect(),
            ContrastiveVariant::InfoNce => (0..total).map(|j| base + j).collect(),
        };
        let lse_num = sims.gather(&num)?.logsumexp()?;
        let lse_den = sims.gather(&den)?.logsumexp()?;
        per.push(lse_den.sub(&lse_num)?);
    }
    Ok(Tensor::stack(&per)?.mean())
}

/// Mean of `1 − cos(prev_i, curr_i)` over rows; `prev` should be detached.
pub fn feature_distill_loss(prev: &Tensor, curr: &Tensor) -> Result<Tensor> {
    if prev.shape() != curr.shape() || prev.shape().len() != 2 || prev.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "feature_distill_loss",
            left: prev.shape().to_vec(),
            right: curr.shape().to_vec(),
        });
    }
    let per = (0..prev.shape()[0])
        .map(|i| Tensor::scalar(1.0).sub(&prev.row(i)?.cosine_similarity(&curr.row(i)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&per)?.mean())
}

/// Columns of `logits` holding `labels`, in that order, as `[B×|labels|]`.
fn old_class_columns(logits: &Tensor, head: &DetectorHead, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let cols = labels
        .iter()
        .map(|y| {
            head.row_of(*y)
                .ok_or_else(|| Error::invalid(format!("label {y} missing from a detector head")))
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<usize> = (0..b).flat_map(|i| cols.iter().map(move |j| i * c + j)).collect();
    logits.gather(&flat)?.reshape(&[b, labels.len()])
}

/// `Σ_j −p̂_j log p_j` over old classes at temperature `τ`, batch mean.
/// `prev_logits` come from the snapshot and are detached here.
pub fn prediction_distill_from_logits(prev_logits: &Tensor, curr_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    if prev_logits.shape() != curr_logits.shape() || prev_logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "prediction_distill_loss",
            left: prev_logits.shape().to_vec(),
            right: curr_logits.shape().to_vec(),
        });
    }
    let p_hat = prev_logits.detach().scale(1.0 / tau).softmax(1)?;
    let log_p = curr_logits.scale(1.0 / tau).log_softmax(1)?;
    let b = prev_logits.shape()[0] as f64;
    Ok(p_hat.mul(&log_p)?.sum().scale(-1.0 / b))
}

#[allow(clippy::too_many_arguments)]
pub fn prediction_distill_loss(
    prev_head: &DetectorHead,
    prev_features: &Tensor,
    curr_head: &DetectorHead,
    curr_features: &Tensor,
    old_labels: &[usize],
    tau: f64,
) -> Result<Tensor> {
    if old_labels.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    if curr_head.class_order().get(..prev_head.num_classes()) != Some(prev_head.class_order()) {
        return Err(Error::invalid(
            "current head's class order does not extend the snapshot's",
        ));
    }
    let prev = old_class_columns(&prev_head.logits(&prev_features.detach())?, prev_head, old_labels)?;
    let curr = old_class_columns(&curr_head.logits(curr_features)?, curr_head, old_labels)?;
    prediction_distill_from_logits(&prev, &curr, tau)
}

/// Loss terms for one batch. `None` marks a term that was not computed.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub ce: Tensor,
    pub router: Option<Tensor>,
    pub label: Option<Tensor>,
    pub fd: Option<Tensor>,
    pub pd: Option<Tensor>,
}

/// `ce + α_router·router + α_label·label + α_fd·fd + α_pd·pd`. Terms whose
/// weight is zero or that are absent are left out of the graph entirely.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let mut total = parts.ce.clone();
    let terms = [
        (&parts.router, weights.alpha_router),
        (&parts.label, weights.alpha_label),
        (&parts.fd, weights.alpha_fd),
        (&parts.pd, weights.alpha_pd),
    ];
    for (part, alpha) in terms {
        if let Some(t) = part.as_ref().filter(|_| alpha != 0.0) {
            total = total.add(&t.scale(alpha))?;
        }
    }
    let v = |p: &Option<Tensor>| p.as_ref().map_or(0.0, |t| t.item());
    let breakdown = LossBreakdown {
        ce: parts.ce.item(),
        router: v(&parts.router),
        label: v(&parts.label),
        fd: v(&parts.fd),
        pd: v(&parts.pd),
        total: total.item(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok((total, breakdown))
}
