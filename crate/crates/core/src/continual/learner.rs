use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{augment_memory, select_exemplar, Instance, MemoryBuffer, Source, TaskSpec, TaskStream};
use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::container::WeightFile;
use crate::descriptions::DescriptionBank;
use crate::encoder::{Adapter, EncoderWeights};
use crate::error::{Error, Result};
use crate::eval_metrics::{forgetting, macro_f1, micro_f1, Forgetting, MetricMatrix};
use crate::moe_lora::{
    route_instance, router_loss, ExpertPools, Normalizer, PoolLayout, Projection, RouterSettings, RoutingDecision,
    RoutingMode,
};
use crate::objectives::{
    ce_from_logits, feature_distill_loss, label_contrastive_loss, prediction_distill_from_logits, total_loss,
    ContrastiveOptions, DetectorHead, LossBreakdown, LossParts, LossWeights,
};

/// Largest tolerated gap between a snapshot and the live model on the probe batch.
const SNAPSHOT_PROBE_TOL: f64 = 1e-12;
const SNAPSHOT_PROBE_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub enabled: bool,
    pub sigma: f64,
    pub copies: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma: 0.05,
            copies: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub top_k: usize,
    pub num_experts: usize,
    pub rank: usize,
    pub projections: Vec<Projection>,
    pub normalizer: Normalizer,
    pub routing_mode: RoutingMode,
    pub stop_gradient: bool,
    /// Distillation temperature.
    pub tau: f64,
    pub contrastive: ContrastiveOptions,
    pub head_mlp: bool,
    pub augmentation: Augmentation,
    pub adam: AdamConfig,
    /// Weight decay on routing rows, applied to their gradients only.
    pub routing_l2: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            loss: LossWeights::default(),
            top_k: 2,
            num_experts: 4,
            rank: 8,
            projections: vec![Projection::Q, Projection::V],
            normalizer: Normalizer::Softmax,
            routing_mode: RoutingMode::Instance,
            stop_gradient: false,
            tau: 1.0,
            contrastive: ContrastiveOptions::default(),
            head_mlp: false,
            augmentation: Augmentation::default(),
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            routing_l2: 1e-4,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("top_k", self.top_k),
            ("num_experts", self.num_experts),
            ("rank", self.rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.top_k > self.num_experts {
            return Err(Error::invalid(format!(
                "top_k {} exceeds num_experts {}",
                self.top_k, self.num_experts
            )));
        }
        if self.rank > model_dim {
            return Err(Error::invalid(format!(
                "rank {} exceeds model_dim {model_dim}",
                self.rank
            )));
        }
        if self.projections.is_empty() {
            return Err(Error::invalid("projections must not be empty"));
        }
        self.loss.validate()?;
        let reals = [
            ("tau", self.tau),
            ("adam.lr", self.adam.lr),
            ("init_std", self.init_std),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("{name} = {v} must be positive")));
        }
        if !(self.routing_l2.is_finite() && self.routing_l2 >= 0.0) {
            return Err(Error::invalid("routing_l2 must be finite and >= 0"));
        }
        let aug = &self.augmentation;
        if aug.enabled && (aug.copies == 0 || !(aug.sigma.is_finite() && aug.sigma >= 0.0)) {
            return Err(Error::invalid("augmentation needs copies >= 1 and sigma >= 0"));
        }
        Ok(())
    }

    pub fn router_settings(&self) -> RouterSettings {
        RouterSettings {
            top_k: self.top_k,
            normalizer: self.normalizer,
            stop_gradient: self.stop_gradient,
        }
    }
}

/// Trainable state: expert pools (θ) and detector head (φ).
#[derive(Debug, Clone)]
pub struct Model {
    pub pools: ExpertPools,
    pub head: DetectorHead,
}

impl Model {
    pub fn init(encoder: &EncoderWeights, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layout = PoolLayout {
            num_layers: encoder.config.num_layers,
            model_dim: encoder.config.model_dim,
            projections: config.projections.clone(),
            num_experts: config.num_experts,
            rank: config.rank,
        };
        let pools = ExpertPools::init(&layout, config.init_std, rng)?;
        let head = DetectorHead::new(encoder.config.model_dim, config.head_mlp, rng)?;
        Ok(Self { pools, head })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.pools.parameters();
        p.extend(self.head.parameters());
        p
    }

    fn frozen_copy(&self) -> Self {
        Self {
            pools: self.pools.deep_copy(false),
            head: self.head.deep_copy(false),
        }
    }

    /// Pools and head as one container; metadata carries the class order.
    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let mut file = WeightFile::new();
        for (name, t) in self.pools.named_tensors() {
            file.push(name, &t)?;
        }
        self.head.write_into(&mut file)?;
        Ok(file)
    }
}

/// Frozen copy of the model as it stood after the previous task.
#[derive(Debug, Clone)]
pub struct Snapshot {
    model: Model,
}

impl Snapshot {
    pub fn take(model: &Model) -> Self {
        Self {
            model: model.frozen_copy(),
        }
    }

    /// Frozen copy with Gaussian noise of scale `sigma` added to every value.
    /// Gives distillation terms a non-trivial target in gradient checks.
    pub fn perturbed(model: &Model, sigma: f64, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snap = Self::take(model);
        for t in snap.parameters() {
            for v in t.values_mut().iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(snap)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn head(&self) -> &DetectorHead {
        &self.model.head
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.model.parameters()
    }

    /// True when no snapshot tensor holds a nonzero gradient.
    pub fn grad_free(&self) -> bool {
        self.parameters()
            .iter()
            .all(|t| !t.requires_grad() && t.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)))
    }
}

/// Per-instance values that stay fixed during a task: the stage-1 `[CLS]`
/// and the snapshot's outputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    base_cls: Option<Tensor>,
    prev_features: Option<Vec<f64>>,
    prev_logits: Option<Vec<f64>>,
}

/// One optimizer step's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub task: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub train_size: usize,
    pub memory_at_start: usize,
    pub epoch_losses: Vec<f64>,
    pub exemplars: Vec<(usize, String)>,
}

/// Outcomes of the protocol checks made during a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtocolChecks {
    pub label_disjoint: bool,
    /// Memory size at the start of each task.
    pub memory_at_start: Vec<usize>,
    /// Earlier exemplars unchanged at every task start.
    pub memory_stable: bool,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    /// Old detector rows unchanged by each head growth.
    pub head_rows_preserved: Vec<bool>,
    /// No snapshot tensor gained a gradient across all backward passes.
    pub snapshot_grad_free: bool,
    /// Largest live-vs-snapshot gap on the probe batch, per snapshot.
    pub snapshot_probe_diff: Vec<f64>,
}

impl ProtocolChecks {
    /// Names of failed checks, empty when all hold.
    pub fn failures(&self, n_way: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !self.label_disjoint {
            out.push("label disjointness".to_string());
        }
        for (t, m) in self.memory_at_start.iter().enumerate() {
            if *m != n_way * t {
                out.push(format!("memory size {m} at start of task {t}, expected {}", n_way * t));
            }
        }
        if !self.memory_stable {
            out.push("memory entries changed".to_string());
        }
        if self.encoder_hash_before.is_empty() || self.encoder_hash_before != self.encoder_hash_after {
            out.push("encoder hash changed".to_string());
        }
        if self.head_rows_preserved.iter().any(|ok| !ok) {
            out.push("old detector rows changed at growth".to_string());
        }
        if !self.snapshot_grad_free {
            out.push("snapshot received a gradient".to_string());
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN counts as a disagreement
        if self.snapshot_probe_diff.iter().any(|d| !(*d <= SNAPSHOT_PROBE_TOL)) {
            out.push("snapshot disagrees with live model on probe".to_string());
        }
        out
    }
}

/// Task-by-task training state over one frozen encoder.
pub struct Learner<'a> {
    pub encoder: &'a EncoderWeights,
    pub bank: Option<&'a DescriptionBank>,
    pub config: TrainConfig,
    pub model: Model,
    pub memory: MemoryBuffer,
    pub snapshot: Option<Snapshot>,
    /// Labels in head-row order.
    pub seen: Vec<usize>,
    pub checks: ProtocolChecks,
    pub losses: Vec<LossRow>,
    rng: ChaCha8Rng,
    step: usize,
    memory_log: Vec<Instance>,
}

impl<'a> Learner<'a> {
    pub fn new(encoder: &'a EncoderWeights, bank: Option<&'a DescriptionBank>, config: TrainConfig) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::invalid("continual training needs a frozen encoder"));
        }
        config.validate(encoder.config.model_dim)?;
        if let Some(b) = bank {
            b.ensure_encoder(encoder)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(encoder, &config, &mut rng)?;
        Ok(Self {
            encoder,
            bank,
            config,
            model,
            memory: MemoryBuffer::default(),
            snapshot: None,
            seen: Vec::new(),
            checks: ProtocolChecks {
                snapshot_grad_free: true,
                memory_stable: true,
                ..ProtocolChecks::default()
            },
            losses: Vec::new(),
            rng,
            step: 0,
            memory_log: Vec::new(),
        })
    }

    fn needs_base_cls(&self) -> bool {
        self.config.routing_mode == RoutingMode::Instance
    }

    /// Stage-1 `[CLS]` of the frozen encoder, with the instance's jitter.
    fn base_cls(&self, inst: &Instance) -> Result<Tensor> {
        Ok(self
            .encoder
            .forward(&inst.ids, &inst.mask, Adapter::Base, inst.noise)?
            .encoding
            .cls)
    }

    /// Stage-2 feature and routing decision of `model` for one instance.
    fn features(&self, model: &Model, inst: &Instance, base_cls: Option<&Tensor>) -> Result<(Tensor, RoutingDecision)> {
        let settings = self.config.router_settings();
        match self.config.routing_mode {
            RoutingMode::Instance => {
                let owned;
                let cls = match base_cls {
                    Some(c) => c,
                    None => {
                        owned = self.base_cls(inst)?;
                        &owned
                    }
                };
                let decision = route_instance(&model.pools, cls, &settings)?;
                let enc = self.encoder.forward(
                    &inst.ids,
                    &inst.mask,
                    Adapter::Instance {
                        pools: &model.pools,
                        decision: &decision,
                    },
                    inst.noise,
                )?;
                Ok((enc.encoding.cls, decision))
            }
            RoutingMode::Token => {
                let enc = self.encoder.forward(
                    &inst.ids,
                    &inst.mask,
                    Adapter::Token {
                        pools: &model.pools,
                        settings: &settings,
                    },
                    inst.noise,
                )?;
                Ok((
                    enc.encoding.cls,
                    RoutingDecision {
                        entries: enc.token_routing,
                    },
                ))
            }
        }
    }

    /// Caches everything a training step reads but never updates.
    pub fn prepare(&self, inst: &Instance) -> Result<Prepared> {
        let base_cls = if self.needs_base_cls() {
            Some(self.base_cls(inst)?)
        } else {
            None
        };
        let (prev_features, prev_logits) = match &self.snapshot {
            Some(snap) => {
                let (f, _) = self.features(snap.model(), inst, base_cls.as_ref())?;
                let logits = snap.head().logits(&f.reshape(&[1, f.len()])?)?;
                (Some(f.to_vec()), Some(logits.to_vec()))
            }
            None => (None, None),
        };
        Ok(Prepared {
            base_cls,
            prev_features,
            prev_logits,
        })
    }

    /// Full training objective on one batch, against the live model.
    pub fn batch_loss(&self, batch: &[(&Instance, &Prepared)]) -> Result<(Tensor, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let w = &self.config.loss;
        let distill = w.alpha_fd > 0.0 || w.alpha_pd > 0.0;
        let old = self.snapshot.as_ref().map_or(0, |s| s.head().num_classes());
        if distill && old > 0 && batch.iter().any(|(_, p)| p.prev_features.is_none()) {
            return Err(Error::invalid("distillation needs snapshot outputs for every instance"));
        }
        let mut feats = Vec::with_capacity(batch.len());
        let mut decisions = Vec::with_capacity(batch.len());
        for (inst, prep) in batch {
            let (f, d) = self.features(&self.model, inst, prep.base_cls.as_ref())?;
            feats.push(f);
            decisions.push(d);
        }
        let gold: Vec<usize> = batch.iter().map(|(i, _)| i.label).collect();
        let feats = Tensor::stack(&feats)?;
        let logits = self.model.head.logits(&feats)?;
        let ce = ce_from_logits(&logits, &self.model.head, &gold)?;

        let router = if w.alpha_router > 0.0 {
            Some(router_loss(&decisions)?)
        } else {
            None
        };
        let label = match self.bank {
            Some(bank) if w.alpha_label > 0.0 && self.seen.len() >= 2 => Some(label_contrastive_loss(
                &feats,
                &gold,
                bank.anchors(),
                &self.seen,
                self.config.contrastive,
            )?),
            _ => None,
        };
        let (b, d) = (batch.len(), feats.shape()[1]);
        let fd = if w.alpha_fd > 0.0 && old > 0 {
            let prev: Vec<f64> = batch
                .iter()
                .flat_map(|(_, p)| p.prev_features.clone().unwrap_or_default())
                .collect();
            Some(feature_distill_loss(&Tensor::new(prev, &[b, d])?, &feats)?)
        } else {
            None
        };
        let pd = if w.alpha_pd > 0.0 && old > 0 {
            let prev: Vec<f64> = batch
                .iter()
                .flat_map(|(_, p)| p.prev_logits.clone().unwrap_or_default())
                .collect();
            let prev = Tensor::new(prev, &[b, old])?;
            Some(prediction_distill_from_logits(
                &prev,
                &logits.slice_cols(0, old)?,
                self.config.tau,
            )?)
        } else {
            None
        };
        total_loss(
            &LossParts {
                ce,
                router,
                label,
                fd,
                pd,
            },
            w,
        )
    }

    /// Trains task `t`, then stores its exemplars and snapshots the model.
    pub fn train_task(&mut self, t: usize, task: &TaskSpec) -> Result<TaskReport> {
        if t > 0 && self.snapshot.is_none() {
            return Err(Error::invalid(format!(
                "task {t} started without a snapshot of task {}",
                t - 1
            )));
        }
        let memory_at_start = self.memory.len();
        self.checks.memory_at_start.push(memory_at_start);
        let stable = self.memory_log.iter().all(|m| self.memory.get(m.label) == Some(m));
        self.checks.memory_stable &= stable && self.memory_log.len() == memory_at_start;

        let old_w = self.model.head.weight.to_vec();
        let old_b = self.model.head.bias.to_vec();
        self.model.head.grow(&task.labels, &mut self.rng)?;
        let new_w = self.model.head.weight.to_vec();
        let new_b = self.model.head.bias.to_vec();
        self.checks
            .head_rows_preserved
            .push(new_w[..old_w.len()] == old_w[..] && new_b[..old_b.len()] == old_b[..]);
        self.seen.extend_from_slice(&task.labels);
        if let Some(bank) = self.bank.filter(|_| self.config.loss.alpha_label > 0.0) {
            bank.ensure_covers(&self.seen)?;
        }

        let mut data: Vec<Instance> = task.train.clone();
        let mut replay: Vec<Instance> = self.memory.instances().cloned().collect();
        let aug = self.config.augmentation;
        if aug.enabled {
            let seed = self.config.seed ^ ((t as u64 + 1) << 32);
            replay.extend(augment_memory(&self.memory, aug.sigma, aug.copies, seed));
        }
        let n_current = data.len();
        data.extend(replay);
        let prepared = data.iter().map(|i| self.prepare(i)).collect::<Result<Vec<_>>>()?;

        let params = self.model.parameters();
        let routing = self.model.pools.routing_parameters();
        let mut adam = AdamState::new(&params, self.config.adam);
        let mut current: Vec<usize> = (0..n_current).collect();
        let mut memory: Vec<usize> = (n_current..data.len()).collect();
        let n_batches = data.len().div_ceil(self.config.batch_size);
        let mut epoch_losses = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            current.shuffle(&mut self.rng);
            memory.shuffle(&mut self.rng);
            let (mut sum, mut count) = (0.0, 0);
            for j in 0..n_batches {
                let idx: Vec<usize> = chunk(&current, n_batches, j)
                    .iter()
                    .chain(chunk(&memory, n_batches, j))
                    .copied()
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let batch: Vec<(&Instance, &Prepared)> = idx.iter().map(|&i| (&data[i], &prepared[i])).collect();
                let (loss, breakdown) = self.batch_loss(&batch)?;
                loss.backward()?;
                drop(loss);
                if let Some(snap) = &self.snapshot {
                    self.checks.snapshot_grad_free &= snap.grad_free();
                }
                if self.config.routing_l2 > 0.0 {
                    for r in &routing {
                        let decay: Vec<f64> = r.values().iter().map(|v| 2.0 * self.config.routing_l2 * v).collect();
                        r.accumulate_grad(&decay);
                    }
                }
                adam.step(&params);
                if params.iter().any(|p| !p.all_finite()) {
                    return Err(Error::NonFinite { op: "parameter update" });
                }
                sum += breakdown.total * batch.len() as f64;
                count += batch.len();
                self.losses.push(LossRow {
                    step: self.step,
                    task: t,
                    epoch,
                    loss: breakdown,
                });
                self.step += 1;
            }
            let mean = sum / count as f64;
            log::debug!("task {t} epoch {}: loss {mean:.5}", epoch + 1);
            epoch_losses.push(mean);
        }

        let mut exemplars = Vec::with_capacity(task.labels.len());
        let trained = self.model.frozen_copy();
        for &label in &task.labels {
            let group: Vec<&Instance> = task.train.iter().filter(|i| i.label == label).collect();
            let feats = group
                .iter()
                .map(|i| Ok(self.inference_features(&trained, i)?.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let pick = group[select_exemplar(&feats)?];
            let mut stored = pick.clone();
            stored.source = Source::Memory;
            self.memory.insert(stored)?;
            exemplars.push((label, pick.text.clone()));
        }
        self.memory_log = self.memory.instances().cloned().collect();

        let snap = Snapshot::take(&self.model);
        let probe: Vec<&Instance> = task.train.iter().take(SNAPSHOT_PROBE_SIZE).collect();
        self.checks.snapshot_probe_diff.push(self.probe_gap(&snap, &probe)?);
        self.snapshot = Some(snap);

        Ok(TaskReport {
            task: t,
            train_size: data.len(),
            memory_at_start,
            epoch_losses,
            exemplars,
        })
    }

    fn inference_features(&self, model: &Model, inst: &Instance) -> Result<Tensor> {
        let clean = Instance {
            noise: None,
            ..inst.clone()
        };
        Ok(self.features(model, &clean, None)?.0)
    }

    /// Largest absolute difference of logits between the live model and `snap`.
    pub fn probe_gap(&self, snap: &Snapshot, probe: &[&Instance]) -> Result<f64> {
        let mut worst = 0.0f64;
        for inst in probe {
            let live = self.inference_features(&self.model, inst)?;
            let frozen = self.inference_features(snap.model(), inst)?;
            let d = live.len();
            let a = self.model.head.logits(&live.reshape(&[1, d])?)?.to_vec();
            let b = snap.head().logits(&frozen.reshape(&[1, d])?)?.to_vec();
            for (x, y) in live.values().iter().zip(frozen.values().iter()).chain(a.iter().zip(&b)) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }

    /// Predicted global labels over every class the head knows.
    pub fn predict(&self, instances: &[Instance]) -> Result<Vec<usize>> {
        let frozen = self.model.frozen_copy();
        let order = frozen.head.class_order();
        instances
            .iter()
            .map(|inst| {
                let f = self.inference_features(&frozen, inst)?;
                let logits = frozen.head.logits(&f.reshape(&[1, f.len()])?)?;
                let best = crate::encoder::argmax(&logits.to_vec());
                Ok(order[best])
            })
            .collect()
    }
}

/// Part `j` of `items` split into `n` near-equal consecutive parts.
fn chunk(items: &[usize], n: usize, j: usize) -> &[usize] {
    let start = items.len() * j / n;
    let end = items.len() * (j + 1) / n;
    &items[start..end]
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub matrix: MetricMatrix,
    pub forgetting: Forgetting,
    pub losses: Vec<LossRow>,
    pub tasks: Vec<TaskReport>,
    pub checks: ProtocolChecks,
    /// Pools and head after each task.
    pub checkpoints: Vec<WeightFile>,
}

/// Trains every task in order and evaluates after each one on the test sets
/// of all tasks seen so far.
pub fn run_experiment(
    encoder: &EncoderWeights,
    bank: Option<&DescriptionBank>,
    stream: &TaskStream,
    config: &TrainConfig,
) -> Result<RunResult> {
    let label_disjoint = stream.validate().is_ok();
    stream.validate()?;
    let mut learner = Learner::new(encoder, bank, config.clone())?;
    learner.checks.label_disjoint = label_disjoint;
    learner.checks.encoder_hash_before = encoder.fingerprint()?;

    let mut matrix = MetricMatrix::default();
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    let mut checkpoints = Vec::with_capacity(stream.tasks.len());
    for (t, task) in stream.tasks.iter().enumerate() {
        let report = learner.train_task(t, task)?;
        log::info!(
            "task {}/{}: {} instances, final loss {:.4}",
            t + 1,
            stream.tasks.len(),
            report.train_size,
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        tasks.push(report);
        let seen = stream.seen_labels(t);
        let (mut micro, mut macro_) = (Vec::new(), Vec::new());
        let (mut all_gold, mut all_pred) = (Vec::new(), Vec::new());
        for past in &stream.tasks[..=t] {
            let pred = learner.predict(&past.test)?;
            let gold: Vec<usize> = past.test.iter().map(|x| x.label).collect();
            micro.push(micro_f1(&gold, &pred, &seen)?);
            macro_.push(macro_f1(&gold, &pred, &seen)?);
            all_gold.extend(gold);
            all_pred.extend(pred);
        }
        let cum_micro = micro_f1(&all_gold, &all_pred, &seen)?;
        let cum_macro = macro_f1(&all_gold, &all_pred, &seen)?;
        log::info!("after task {}: cumulative micro-F1 {:.4}", t + 1, cum_micro);
        matrix.push_row(micro, macro_, cum_micro, cum_macro)?;
        let mut file = learner.model.to_weight_file()?;
        file.metadata.insert("task".into(), t.into());
        checkpoints.push(file);
    }
    learner.checks.encoder_hash_after = encoder.fingerprint()?;
    let forgetting = forgetting(&matrix)?;
    Ok(RunResult {
        matrix,
        forgetting,
        losses: learner.losses,
        tasks,
        checks: learner.checks,
        checkpoints,
    })
}
