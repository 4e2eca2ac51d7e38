use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::weights::{EncoderWeights, LayerWeights, Linear};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::moe_lora::{
    route_tokens_mole, ExpertPool, ExpertPools, PoolRouting, Projection, RouterSettings, RoutingDecision,
};

#[derive(Debug, Clone)]
pub struct SentenceEncoding {
    /// `[seq×d]`; rows past the mask are zero.
    pub token_states: Tensor,
    pub cls: Tensor,
    pub attention_mask: Vec<bool>,
}

/// How the adapted projections are modified.
#[derive(Debug, Clone, Copy)]
pub enum Adapter<'a> {
    Base,
    /// One precomputed decision shared by every token.
    Instance {
        pools: &'a ExpertPools,
        decision: &'a RoutingDecision,
    },
    /// Decisions computed per token from each block's input.
    Token {
        pools: &'a ExpertPools,
        settings: &'a RouterSettings,
    },
}

/// Gaussian jitter added to token embeddings at lookup time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingNoise {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub encoding: SentenceEncoding,
    /// Token-mode routing entries, empty otherwise.
    pub token_routing: Vec<PoolRouting>,
}

/// Stage-1 forward: the frozen model with no expert deltas.
pub fn encode_base(ids: &[usize], mask: &[bool], weights: &EncoderWeights) -> Result<SentenceEncoding> {
    Ok(weights.forward(ids, mask, Adapter::Base, None)?.encoding)
}

/// Stage-2 forward with the decision's experts mixed into each adapted projection.
pub fn encode_with_experts(
    ids: &[usize],
    mask: &[bool],
    weights: &EncoderWeights,
    pools: &ExpertPools,
    decision: &RoutingDecision,
) -> Result<SentenceEncoding> {
    Ok(weights
        .forward(ids, mask, Adapter::Instance { pools, decision }, None)?
        .encoding)
}

fn check_decision(pools: &ExpertPools, decision: &RoutingDecision, layers: usize) -> Result<()> {
    for pool in pools.pools() {
        if pool.layer >= layers {
            return Err(Error::invalid(format!(
                "pool for layer {} but the encoder has {layers} layers",
                pool.layer
            )));
        }
        let e = decision.entry(pool.layer, pool.projection).ok_or_else(|| {
            Error::invalid(format!(
                "routing decision has no entry for layer {} projection {}",
                pool.layer,
                pool.projection.tag()
            ))
        })?;
        if e.selected.iter().any(|k| *k >= pool.num_experts()) || e.weights.len() != e.selected.len() {
            return Err(Error::invalid("routing decision does not fit its pool"));
        }
    }
    for e in &decision.entries {
        if pools.get(e.layer, e.projection).is_none() {
            return Err(Error::invalid(format!(
                "routing decision entry for layer {} projection {} has no pool",
                e.layer,
                e.projection.tag()
            )));
        }
    }
    Ok(())
}

/// Per-layer state for the adapter while computing one block.
enum LayerAdapter<'a> {
    None,
    Instance {
        pools: &'a ExpertPools,
        decision: &'a RoutingDecision,
    },
    /// Per-token routing for each pool of this layer.
    Token(Vec<(&'a ExpertPool, Vec<PoolRouting>)>),
}

impl LayerAdapter<'_> {
    fn project(&self, layer: usize, p: Projection, lin: &Linear, x: &Tensor) -> Result<Tensor> {
        let base = lin.apply(x)?;
        match self {
            LayerAdapter::None => Ok(base),
            LayerAdapter::Instance { pools, decision } => {
                let Some(pool) = pools.get(layer, p) else {
                    return Ok(base);
                };
                let entry = decision.entry(layer, p).expect("checked");
                let mut h = base;
                for (j, &k) in entry.selected.iter().enumerate() {
                    let delta = pool.experts[k].delta(x)?;
                    h = h.add(&delta.mul_scalar(&entry.weights.index(j)?)?)?;
                }
                Ok(h)
            }
            LayerAdapter::Token(per_pool) => {
                let Some((pool, routes)) = per_pool.iter().find(|(pool, _)| pool.projection == p) else {
                    return Ok(base);
                };
                let n = x.shape()[0];
                let zero = Tensor::scalar(0.0);
                let mut h = base;
                for k in 0..pool.num_experts() {
                    if !routes.iter().any(|r| r.selected.contains(&k)) {
                        continue;
                    }
                    let gate = (0..n)
                        .map(|i| match routes[i].selected.iter().position(|s| *s == k) {
                            Some(j) => routes[i].weights.index(j),
                            None => Ok(zero.clone()),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let gate = Tensor::stack(&gate)?.reshape(&[n])?;
                    h = h.add(&pool.experts[k].delta(x)?.mul_col(&gate)?)?;
                }
                Ok(h)
            }
        }
    }
}

impl EncoderWeights {
    fn check_input(&self, ids: &[usize], mask: &[bool]) -> Result<usize> {
        if ids.len() != mask.len() {
            return Err(Error::invalid(format!(
                "{} ids but {} mask entries",
                ids.len(),
                mask.len()
            )));
        }
        if ids.is_empty() || ids.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = ids.iter().find(|i| **i >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let n = mask.iter().take_while(|m| **m).count();
        if n == 0 || mask[n..].iter().any(|m| *m) {
            return Err(Error::invalid("attention mask must be a non-empty prefix"));
        }
        Ok(n)
    }

    /// Full forward. Only the unmasked prefix is computed, which makes the
    /// output independent of trailing padding by construction.
    pub fn forward(
        &self,
        ids: &[usize],
        mask: &[bool],
        adapter: Adapter<'_>,
        noise: Option<EmbeddingNoise>,
    ) -> Result<Encoded> {
        let n = self.check_input(ids, mask)?;
        let (d, eps) = (self.config.model_dim, self.config.layernorm_eps);
        if let Adapter::Instance { pools, decision } = adapter {
            check_decision(pools, decision, self.layers.len())?;
        }
        if let Adapter::Token { pools, .. } = adapter {
            if let Some(p) = pools.pools().iter().find(|p| p.layer >= self.layers.len()) {
                return Err(Error::invalid(format!("pool for missing layer {}", p.layer)));
            }
        }

        let mut tok = self.token_emb.gather_rows(&ids[..n])?;
        if let Some(EmbeddingNoise { sigma, seed }) = noise.filter(|z| z.sigma > 0.0) {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jitter = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
            tok = tok.add(&Tensor::new(jitter, &[n, d])?)?;
        }
        let pos = self.pos_emb.gather_rows(&(0..n).collect::<Vec<_>>())?;
        let mut x = tok
            .add(&pos)?
            .layer_norm(&self.emb_norm.gain, &self.emb_norm.bias, eps)?;

        let mut token_routing = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let la = match adapter {
                Adapter::Base => LayerAdapter::None,
                Adapter::Instance { pools, decision } => LayerAdapter::Instance { pools, decision },
                Adapter::Token { pools, settings } => {
                    let mut per_pool = Vec::new();
                    for pool in pools.pools().iter().filter(|p| p.layer == l) {
                        let routes = route_tokens_mole(pool, &x, settings)?;
                        token_routing.extend(routes.iter().cloned());
                        per_pool.push((pool, routes));
                    }
                    LayerAdapter::Token(per_pool)
                }
            };
            x = self.block(l, layer, &x, &la)?;
        }

        let cls = x.row(0)?;
        let token_states = if n == ids.len() {
            x
        } else {
            let zero = Tensor::zeros(&[d]);
            let rows = (0..ids.len())
                .map(|i| if i < n { x.row(i) } else { Ok(zero.clone()) })
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rows)?
        };
        Ok(Encoded {
            encoding: SentenceEncoding {
                token_states,
                cls,
                attention_mask: mask.to_vec(),
            },
            token_routing,
        })
    }

    fn block(&self, l: usize, w: &LayerWeights, x: &Tensor, la: &LayerAdapter<'_>) -> Result<Tensor> {
        let eps = self.config.layernorm_eps;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let q = la.project(l, Projection::Q, &w.q, x)?;
        let k = la.project(l, Projection::K, &w.k, x)?;
        let v = la.project(l, Projection::V, &w.v, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = (
                q.slice_cols(h * dh, dh)?,
                k.slice_cols(h * dh, dh)?,
                v.slice_cols(h * dh, dh)?,
            );
            let att = qh.matmul_t(&kh)?.scale(scale).softmax(1)?;
            outs.push(att.matmul(&vh)?);
        }
        let ctx = if heads == 1 {
            outs.pop().expect("one head")
        } else {
            Tensor::concat_cols(&outs)?
        };
        let o = la.project(l, Projection::O, &w.o, &ctx)?;
        let x = x.add(&o)?.layer_norm(&w.attn_norm.gain, &w.attn_norm.bias, eps)?;
        let f = w.ffn_out.apply(&w.ffn_in.apply(&x)?.gelu())?;
        x.add(&f)?.layer_norm(&w.ffn_norm.gain, &w.ffn_norm.bias, eps)
    }
}
