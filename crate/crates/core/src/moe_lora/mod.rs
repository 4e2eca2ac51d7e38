//! Pools of LoRA experts attached to attention projections, the
//! instance-level router that picks the top-K experts per sentence from the
//! frozen `[CLS]` vector, the score-weighted combination of their deltas, and
//! the router loss. A token-level routing mode exists only as a comparison
//! point.

mod routing;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use routing::{
    combine_weights, route_instance, route_tokens_mole, router_loss, score, select_topk, PoolRouting, RouterSettings,
    RoutingDecision,
};

/// Attention projection hosting an expert pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown projection {tag:?}")))
    }
}

/// Normalization of the selected experts' raw scores into mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// Softmax over the selected scores.
    #[default]
    Softmax,
    /// `s_k / Σ s`, falling back to softmax when a selected score is
    /// non-positive or the sum is below `1e-6`.
    PaperLiteral,
}

/// Where routing decisions are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// One decision per sentence from the frozen encoder's `[CLS]` state.
    #[default]
    Instance,
    /// One decision per token per block from the block's incoming hidden state.
    Token,
}

/// One low-rank expert: `delta(x) = A·B·x` with `A: [d_out×r]`, `B: [r×d]`.
#[derive(Debug, Clone)]
pub struct LoraExpert {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraExpert {
    /// `A ~ N(0, std²)`, `B = 0`.
    pub fn init(d_out: usize, d: usize, rank: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} must be in 1..={}",
                d_out.min(d)
            )));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let a = (0..d_out * rank).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            a: Tensor::param(a, &[d_out, rank])?,
            b: Tensor::param(vec![0.0; rank * d], &[rank, d])?,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[0]
    }

    /// Rows of `x: [n×d]` mapped through `A·B`, giving `[n×d_out]`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.b)?.matmul_t(&self.a)
    }
}

/// The `M` experts adapting one projection of one block, plus their routing rows.
#[derive(Debug, Clone)]
pub struct ExpertPool {
    pub layer: usize,
    pub projection: Projection,
    pub experts: Vec<LoraExpert>,
    /// `[M×d]`, row `k` is expert `k`'s routing vector.
    pub routing: Tensor,
}

impl ExpertPool {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        layer: usize,
        projection: Projection,
        num_experts: usize,
        d: usize,
        d_out: usize,
        rank: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::invalid("an expert pool needs at least one expert"));
        }
        let experts = (0..num_experts)
            .map(|_| LoraExpert::init(d_out, d, rank, std, rng))
            .collect::<Result<Vec<_>>>()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let routing = (0..num_experts * d).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            layer,
            projection,
            experts,
            routing: Tensor::param(routing, &[num_experts, d])?,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.routing.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let m = self.num_experts();
        if m == 0 || self.routing.shape().len() != 2 || self.routing.shape()[0] != m {
            return Err(Error::invalid("routing rows must match expert count"));
        }
        let first = &self.experts[0];
        for e in &self.experts {
            if e.a.shape() != first.a.shape() || e.b.shape() != first.b.shape() {
                return Err(Error::invalid("experts in a pool must share (d_out, r)"));
            }
        }
        Ok(())
    }

    pub fn deep_copy(&self, requires_grad: bool) -> Self {
        Self {
            layer: self.layer,
            projection: self.projection,
            experts: self
                .experts
                .iter()
                .map(|e| LoraExpert {
                    a: e.a.deep_copy(requires_grad),
                    b: e.b.deep_copy(requires_grad),
                })
                .collect(),
            routing: self.routing.deep_copy(requires_grad),
        }
    }
}

/// Layout of the pools attached to an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolLayout {
    pub num_layers: usize,
    pub model_dim: usize,
    pub projections: Vec<Projection>,
    pub num_experts: usize,
    pub rank: usize,
}

/// Every pool of the model, ordered by `(layer, projection)`.
#[derive(Debug, Clone)]
pub struct ExpertPools {
    pools: Vec<ExpertPool>,
}

impl ExpertPools {
    /// Draws pools layer by layer, projection by projection, expert by expert
    /// (A factors), then routing rows.
    pub fn init(layout: &PoolLayout, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut projections = layout.projections.clone();
        projections.sort();
        projections.dedup();
        if projections.is_empty() {
            return Err(Error::invalid("at least one adapted projection is required"));
        }
        let mut pools = Vec::new();
        for layer in 0..layout.num_layers {
            for &p in &projections {
                pools.push(ExpertPool::init(
                    layer,
                    p,
                    layout.num_experts,
                    layout.model_dim,
                    layout.model_dim,
                    layout.rank,
                    std,
                    rng,
                )?);
            }
        }
        Ok(Self { pools })
    }

    pub fn from_pools(mut pools: Vec<ExpertPool>) -> Result<Self> {
        pools.sort_by_key(|p| (p.layer, p.projection));
        for w in pools.windows(2) {
            if (w[0].layer, w[0].projection) == (w[1].layer, w[1].projection) {
                return Err(Error::invalid("duplicate pool for one (layer, projection)"));
            }
        }
        for p in &pools {
            p.validate()?;
        }
        Ok(Self { pools })
    }

    pub fn pools(&self) -> &[ExpertPool] {
        &self.pools
    }

    pub fn pools_mut(&mut self) -> &mut [ExpertPool] {
        &mut self.pools
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn get(&self, layer: usize, projection: Projection) -> Option<&ExpertPool> {
        self.pools
            .iter()
            .find(|p| p.layer == layer && p.projection == projection)
    }

    /// All expert factors followed by all routing matrices.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for p in &self.pools {
            for e in &p.experts {
                out.push(e.a.clone());
                out.push(e.b.clone());
            }
        }
        out.extend(self.routing_parameters());
        out
    }

    pub fn routing_parameters(&self) -> Vec<Tensor> {
        self.pools.iter().map(|p| p.routing.clone()).collect()
    }

    pub fn deep_copy(&self, requires_grad: bool) -> Self {
        Self {
            pools: self.pools.iter().map(|p| p.deep_copy(requires_grad)).collect(),
        }
    }

    /// Named tensors for serialization.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for p in &self.pools {
            let prefix = format!("pool.{}.{}", p.layer, p.projection.tag());
            out.push((format!("{prefix}.routing"), p.routing.clone()));
            for (k, e) in p.experts.iter().enumerate() {
                out.push((format!("{prefix}.expert.{k}.a"), e.a.clone()));
                out.push((format!("{prefix}.expert.{k}.b"), e.b.clone()));
            }
        }
        out
    }

    /// Rebuilds pools from tensors named as in [`ExpertPools::named_tensors`].
    pub fn from_named(layout: &PoolLayout, lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<Self> {
        let mut projections = layout.projections.clone();
        projections.sort();
        projections.dedup();
        let d = layout.model_dim;
        let mut pools = Vec::new();
        for layer in 0..layout.num_layers {
            for &p in &projections {
                let prefix = format!("pool.{layer}.{}", p.tag());
                let routing = lookup(&format!("{prefix}.routing"), &[layout.num_experts, d])?;
                let experts = (0..layout.num_experts)
                    .map(|k| {
                        Ok(LoraExpert {
                            a: lookup(&format!("{prefix}.expert.{k}.a"), &[d, layout.rank])?,
                            b: lookup(&format!("{prefix}.expert.{k}.b"), &[layout.rank, d])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                pools.push(ExpertPool {
                    layer,
                    projection: p,
                    experts,
                    routing,
                });
            }
        }
        Self::from_pools(pools)
    }
}
