use serde::{Deserialize, Serialize};

use super::{ExpertPool, ExpertPools, Normalizer, Projection};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Paper-literal weights fall back to softmax when the selected scores sum below this.
const LITERAL_MIN_DENOMINATOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSettings {
    pub top_k: usize,
    pub normalizer: Normalizer,
    /// Detach the scores feeding the combination weights, so routing rows learn
    /// only through the router loss.
    pub stop_gradient: bool,
}

impl Default for RouterSettings {
    fn default() -> Self {
        Self {
            top_k: 2,
            normalizer: Normalizer::Softmax,
            stop_gradient: false,
        }
    }
}

/// Routing for one pool (and, in token mode, one token).
#[derive(Debug, Clone)]
pub struct PoolRouting {
    pub layer: usize,
    pub projection: Projection,
    pub token: Option<usize>,
    /// Ascending expert indices, `K` of them.
    pub selected: Vec<usize>,
    /// Raw scores for all `M` experts, still attached to the routing rows.
    pub scores: Tensor,
    /// Mixing weights aligned with `selected`.
    pub weights: Tensor,
    /// Paper-literal normalizer fell back to softmax.
    pub fallback: bool,
}

/// Routing for every pool for one input sentence.
#[derive(Debug, Clone, Default)]
pub struct RoutingDecision {
    pub entries: Vec<PoolRouting>,
}

impl RoutingDecision {
    pub fn entry(&self, layer: usize, projection: Projection) -> Option<&PoolRouting> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.projection == projection && e.token.is_none())
    }

    /// `(layer, projection, selected)` triples, for comparisons in tests and logs.
    pub fn selections(&self) -> Vec<(usize, Projection, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.layer, e.projection, e.selected.clone()))
            .collect()
    }
}

/// `s_k = ⟨W_k, cls⟩` for every expert of the pool.
pub fn score(pool: &ExpertPool, cls: &Tensor) -> Result<Tensor> {
    let (m, d) = (pool.num_experts(), pool.input_dim());
    if cls.len() != d {
        return Err(Error::Shape {
            op: "score",
            left: pool.routing.shape().to_vec(),
            right: cls.shape().to_vec(),
        });
    }
    pool.routing.matmul_t(&cls.reshape(&[1, d])?)?.reshape(&[m])
}

/// Indices of the `k` largest scores, ascending. Ties go to the lower index,
/// which makes the result the lexicographically first maximizer of the
/// selected-score sum.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let m = scores.len();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("top-k needs 1 <= K <= M, got K={k}, M={m}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "select_topk" });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Mixing weights over the selected experts. Returns the weights and whether
/// the paper-literal normalizer fell back to softmax.
pub fn combine_weights(scores: &Tensor, indices: &[usize], normalizer: Normalizer) -> Result<(Tensor, bool)> {
    let picked = scores.gather(indices)?;
    match normalizer {
        Normalizer::Softmax => Ok((picked.softmax(0)?, false)),
        Normalizer::PaperLiteral => {
            let raw = picked.to_vec();
            let total: f64 = raw.iter().sum();
            if raw.iter().any(|s| *s <= 0.0) || total < LITERAL_MIN_DENOMINATOR {
                log::debug!("paper-literal routing weights fell back to softmax for {raw:?}");
                return Ok((picked.softmax(0)?, true));
            }
            let w = picked.mul_scalar(&picked.sum().recip()?)?;
            Ok((w, false))
        }
    }
}

fn decide(
    scores: Tensor,
    layer: usize,
    projection: Projection,
    token: Option<usize>,
    settings: &RouterSettings,
) -> Result<PoolRouting> {
    let selected = select_topk(&scores.values(), settings.top_k)?;
    let source = if settings.stop_gradient {
        scores.detach()
    } else {
        scores.clone()
    };
    let (weights, fallback) = combine_weights(&source, &selected, settings.normalizer)?;
    Ok(PoolRouting {
        layer,
        projection,
        token,
        selected,
        scores,
        weights,
        fallback,
    })
}

/// One decision per pool from a single `[CLS]` vector, shared by every token.
pub fn route_instance(pools: &ExpertPools, cls: &Tensor, settings: &RouterSettings) -> Result<RoutingDecision> {
    let entries = pools
        .pools()
        .iter()
        .map(|pool| decide(score(pool, cls)?, pool.layer, pool.projection, None, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoutingDecision { entries })
}

/// Per-token decisions for one pool from the hidden states entering its block.
pub fn route_tokens_mole(pool: &ExpertPool, states: &Tensor, settings: &RouterSettings) -> Result<Vec<PoolRouting>> {
    let all = states.matmul_t(&pool.routing)?;
    (0..all.shape()[0])
        .map(|i| decide(all.row(i)?, pool.layer, pool.projection, Some(i), settings))
        .collect()
}

/// `−Σ_{k∈K} s_k`, averaged over the entries of each decision and then over
/// the batch.
pub fn router_loss(decisions: &[RoutingDecision]) -> Result<Tensor> {
    let mut per_instance = Vec::with_capacity(decisions.len());
    for d in decisions {
        if d.entries.is_empty() {
            continue;
        }
        let sums = d
            .entries
            .iter()
            .map(|e| Ok(e.scores.gather(&e.selected)?.sum()))
            .collect::<Result<Vec<_>>>()?;
        per_instance.push(Tensor::stack(&sums)?.mean());
    }
    if per_instance.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(Tensor::stack(&per_instance)?.mean().neg())
}
