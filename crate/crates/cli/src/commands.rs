use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use leaf_core::autodiff::{grad_check, set_gradient_fault};
use leaf_core::continual::{
    build_stream, run_experiment, write_run_outputs, Instance, Learner, RunResult, Snapshot, Source, TrainConfig,
    METRICS_FILE,
};
use leaf_core::data_synth::{self, load_jsonl, Dataset, GeneratorSpec, Split};
use leaf_core::descriptions::{encode_bank, load_descriptions, subset_bank, DescriptionBank, RawDescriptions};
use leaf_core::encoder::{
    fine_tune_base, pretrain_masked, tokenize, BaseExample, EncoderConfig, EncoderWeights, Vocab,
};
use leaf_core::eval_metrics::{aggregate_runs, Cell, MetricMatrix};
use leaf_core::fsutil::{read_to_string, write_atomic};
use leaf_core::objectives::LossWeights;

use crate::config::{Mode, RunConfig, SNAPSHOT_FILE};
use crate::CliError;

pub const ENCODER_FILE: &str = "encoder.bin";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";
pub const BASE_REPORT_FILE: &str = "base_report.json";

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-5;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(write_atomic(path, format!("{json}\n").as_bytes())?)
}

pub fn gen_data(spec: &GeneratorSpec, out: &Path) -> Result<(), CliError> {
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = data_synth::generate(spec)?;
    corpus.write(out)?;
    log::info!(
        "wrote {} records and {} descriptions to {}",
        corpus.records.len(),
        corpus.descriptions.len(),
        out.display()
    );
    Ok(())
}

/// Dataset and descriptions produced by `gen-data`.
pub struct Inputs {
    pub dataset: Dataset,
    pub descriptions: RawDescriptions,
}

pub fn load_inputs(data_dir: &Path) -> Result<Inputs, CliError> {
    let dataset = load_jsonl(&data_dir.join(data_synth::DATASET_FILE))?;
    let known: HashSet<String> = dataset.label_names.iter().cloned().collect();
    let descriptions = load_descriptions(&data_dir.join(data_synth::DESCRIPTIONS_FILE), Some(&known))?;
    Ok(Inputs { dataset, descriptions })
}

/// Train-split sentences plus all descriptions. Test sentences never shape the vocabulary.
pub fn build_vocab(inputs: &Inputs) -> Vocab {
    let texts = inputs
        .dataset
        .split(Split::Train)
        .map(|i| i.text.as_str())
        .chain(inputs.descriptions.values().flatten().map(String::as_str));
    Vocab::build(texts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseReport {
    pub labels: Vec<String>,
    pub examples: usize,
    pub mlm_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub fingerprint: String,
}

pub fn pretrain_base(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<BaseReport, CliError> {
    let inputs = load_inputs(data_dir)?;
    let ds = &inputs.dataset;
    let n = cfg.base.num_labels;
    if ds.num_labels() < n {
        return Err(CliError::Config(format!(
            "base task wants {n} labels, dataset has {}",
            ds.num_labels()
        )));
    }
    let vocab = build_vocab(&inputs);
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        ..cfg.encoder.clone()
    };
    let examples = ds
        .split(Split::Train)
        .filter(|i| i.label < n)
        .map(|i| {
            let t = tokenize(&i.text, &vocab, config.max_seq_len)?;
            Ok(BaseExample {
                ids: t.ids,
                mask: t.mask,
                label: i.label,
            })
        })
        .collect::<leaf_core::Result<Vec<_>>>()?;
    // Unlabeled text only: train-split sentences of every label plus descriptions.
    let sentences = ds
        .split(Split::Train)
        .map(|i| i.text.as_str())
        .chain(inputs.descriptions.values().flatten().map(String::as_str))
        .map(|text| {
            let t = tokenize(text, &vocab, config.max_seq_len)?;
            Ok((t.ids, t.mask))
        })
        .collect::<leaf_core::Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = EncoderWeights::init(&config, vocab, &mut rng)?;
    let mlm_losses = pretrain_masked(&weights, &sentences, &cfg.base.mlm_options(), &mut rng)?;
    log::info!("base task: {} labels, {} examples", n, examples.len());
    let (weights, report) = fine_tune_base(weights, &examples, n, &cfg.base.options(), &mut rng)?;
    let fingerprint = weights.fingerprint()?;
    weights.save(&out.join(ENCODER_FILE))?;
    write_atomic(&out.join(FINGERPRINT_FILE), format!("{fingerprint}\n").as_bytes())?;
    let base = BaseReport {
        labels: ds.label_names[..n].to_vec(),
        examples: examples.len(),
        mlm_losses,
        epoch_losses: report.epoch_losses,
        train_accuracy: report.train_accuracy,
        fingerprint,
    };
    write_json(&out.join(BASE_REPORT_FILE), &base)?;
    write_atomic(&out.join(SNAPSHOT_FILE), cfg.to_json().as_bytes())?;
    log::info!("base train accuracy {:.3}", base.train_accuracy);
    Ok(base)
}

/// Loads the frozen encoder and checks it against the recorded fingerprint.
pub fn load_encoder(base_dir: &Path) -> Result<EncoderWeights, CliError> {
    let weights = EncoderWeights::load(&base_dir.join(ENCODER_FILE))?;
    if !weights.is_frozen() {
        return Err(CliError::Runtime("base encoder is not frozen".into()));
    }
    let actual = weights.fingerprint()?;
    let recorded = read_to_string(&base_dir.join(FINGERPRINT_FILE))?;
    if recorded.trim() != actual {
        return Err(CliError::Runtime(format!(
            "{} records encoder fingerprint {}, the stored weights hash to {actual}",
            FINGERPRINT_FILE,
            recorded.trim()
        )));
    }
    Ok(weights)
}

/// Everything a continual run reads, loaded once and shared across seeds.
pub struct Prepared {
    pub encoder: EncoderWeights,
    pub inputs: Inputs,
    pub full_bank: DescriptionBank,
}

pub fn prepare(data_dir: &Path, base_dir: &Path) -> Result<Prepared, CliError> {
    let encoder = load_encoder(base_dir)?;
    let inputs = load_inputs(data_dir)?;
    let ids: BTreeMap<String, usize> = inputs
        .dataset
        .label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let full_bank = encode_bank(&inputs.descriptions, &ids, &encoder)?;
    Ok(Prepared {
        encoder,
        inputs,
        full_bank,
    })
}

/// One continual run under `cfg`, written to `out` when given.
pub fn train_run(cfg: &RunConfig, prep: &Prepared, out: Option<&Path>) -> Result<RunResult, CliError> {
    let ds = &prep.inputs.dataset;
    let candidates: Vec<usize> = (cfg.base.num_labels..ds.num_labels()).collect();
    let stream = build_stream(
        ds,
        &candidates,
        cfg.stream,
        cfg.seed,
        &prep.encoder.vocab,
        prep.encoder.config.max_seq_len,
    )?;
    let bank = subset_bank(&prep.full_bank, cfg.n_descriptions, cfg.seed)?;
    let train = cfg.effective_train();
    log::info!(
        "run mode={} seed={} M={} K={} stream {}x{}-way {}-shot",
        cfg.mode.name(),
        cfg.seed,
        train.num_experts,
        train.top_k,
        cfg.stream.num_tasks,
        cfg.stream.n_way,
        cfg.stream.k_shot
    );
    let result = run_experiment(&prep.encoder, Some(&bank), &stream, &train)?;
    let failures = result.checks.failures(cfg.stream.n_way);
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "protocol checks failed: {}",
            failures.join("; ")
        )));
    }
    if let Some(dir) = out {
        write_atomic(&dir.join(SNAPSHOT_FILE), cfg.to_json().as_bytes())?;
        write_run_outputs(dir, &result)?;
    }
    Ok(result)
}

pub fn resolve_dir(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} directory: pass --{what} or set paths.{what}_dir")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Components,
    NDescriptions,
    NExperts,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::NDescriptions => "n_descriptions",
            Axis::NExperts => "n_experts",
        }
    }

    /// `(setting label, config)` pairs for this axis.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Axis::Components => Mode::LADDER
                .iter()
                .map(|m| {
                    let mut c = base.clone();
                    c.mode = *m;
                    (m.name().to_string(), c)
                })
                .collect(),
            Axis::NDescriptions => [1, 3, 5]
                .iter()
                .map(|&n| {
                    let mut c = base.clone();
                    c.n_descriptions = n;
                    (n.to_string(), c)
                })
                .collect(),
            Axis::NExperts => [4, 8, 12]
                .iter()
                .map(|&m| {
                    let mut c = base.clone();
                    c.train.num_experts = m;
                    (m.to_string(), c)
                })
                .collect(),
        }
    }
}

/// One `(setting, seed)` cell of an ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub setting: String,
    pub seed: u64,
    /// Cumulative micro-F1 after each task.
    pub cumulative_micro: Vec<f64>,
    pub forgetting: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: String,
    pub final_f1: Cell,
    pub forgetting: Cell,
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let t = runs.first().map_or(0, |r| r.cumulative_micro.len());
    let mut out = String::from("setting,seed");
    for i in 1..=t {
        let _ = write!(out, ",task_{i}");
    }
    out.push_str(",forgetting\n");
    for r in runs {
        let _ = write!(out, "{},{}", r.setting, r.seed);
        for v in &r.cumulative_micro {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.forgetting);
    }
    out
}

pub fn summarize(runs: &[AblationRun]) -> Vec<SettingSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.setting.as_str()) {
            order.push(&r.setting);
        }
    }
    order
        .into_iter()
        .map(|s| {
            let group: Vec<&AblationRun> = runs.iter().filter(|r| r.setting == s).collect();
            let finals: Vec<f64> = group
                .iter()
                .filter_map(|r| r.cumulative_micro.last().copied())
                .collect();
            let forg: Vec<f64> = group.iter().map(|r| r.forgetting).collect();
            SettingSummary {
                setting: s.to_string(),
                final_f1: Cell::of(&finals),
                forgetting: Cell::of(&forg),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SettingSummary]) -> String {
    let mut out = String::from("setting,final_mean,final_std,forgetting_mean,forgetting_std,final_cell\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.setting,
            r.final_f1.mean,
            r.final_f1.std,
            r.forgetting.mean,
            r.forgetting.std,
            r.final_f1.render()
        );
    }
    out
}

/// Runs every setting of `axis` over `n_seeds` seeds. Each run gets its own
/// directory `out/<setting>/seed_<s>`; the combined grid and per-setting
/// summary land in `out`.
pub fn ablate(cfg: &RunConfig, prep: &Prepared, axis: Axis, out: &Path) -> Result<Vec<AblationRun>, CliError> {
    let mut runs = Vec::new();
    for (label, setting) in axis.settings(cfg) {
        setting.validate()?;
        for s in 0..cfg.n_seeds as u64 {
            let mut c = setting.clone();
            c.seed = cfg.seed + s;
            let dir = out.join(&label).join(format!("seed_{}", c.seed));
            let result = train_run(&c, prep, Some(&dir))?;
            runs.push(AblationRun {
                setting: label.clone(),
                seed: c.seed,
                cumulative_micro: result.matrix.cumulative_micro.clone(),
                forgetting: result.forgetting.mean,
            });
        }
    }
    let name = axis.name();
    write_atomic(
        &out.join(format!("ablation_{name}.csv")),
        ablation_csv(&runs).as_bytes(),
    )?;
    write_atomic(
        &out.join(format!("ablation_{name}_summary.csv")),
        summary_csv(&summarize(&runs)).as_bytes(),
    )?;
    Ok(runs)
}

#[derive(Deserialize)]
struct MetricsMatrixOnly {
    matrix: MetricMatrix,
}

/// Aggregates run directories into mean±std tables. Writes `out` (CSV) and
/// the same path with a `.txt` extension (plain-text render).
pub fn report(runs: &[PathBuf], out: &Path) -> Result<String, CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let matrices = runs
        .iter()
        .map(|dir| {
            let path = dir.join(METRICS_FILE);
            let text = read_to_string(&path)?;
            let doc: MetricsMatrixOnly =
                serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            Ok(doc.matrix)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let agg = aggregate_runs(&matrices)?;
    let mut csv = String::from("after_task,eval_task,micro_mean,micro_std,cell\n");
    for (t, row) in agg.micro.iter().enumerate() {
        for (i, c) in row.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{},{},{}", t + 1, i + 1, c.mean, c.std, c.render());
        }
    }
    for (t, c) in agg.cumulative_micro.iter().enumerate() {
        let _ = writeln!(csv, "{},cumulative,{},{},{}", t + 1, c.mean, c.std, c.render());
    }
    let _ = writeln!(
        csv,
        "final,forgetting,{},{},{}",
        agg.forgetting.mean,
        agg.forgetting.std,
        agg.forgetting.render()
    );
    let mut text = format!("runs: {}\n", agg.runs);
    text.push_str("task      ");
    for t in 1..=agg.cumulative_micro.len() {
        let _ = write!(text, "{:>12}", format!("T{t}"));
    }
    text.push_str("\nmicro-F1  ");
    for c in &agg.cumulative_micro {
        let _ = write!(text, "{:>12}", c.render());
    }
    let _ = writeln!(text, "\nforgetting {}", agg.forgetting.render());
    write_atomic(out, csv.as_bytes())?;
    write_atomic(&out.with_extension("txt"), text.as_bytes())?;
    Ok(text)
}

/// Knobs for the gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    /// Swap in the deliberately wrong `matmul_t` backward.
    pub inject_fault: bool,
    /// Write a NaN into the batch before checking.
    pub poison_nan: bool,
    pub seed: u64,
}

/// Full objective with all terms active on a tiny model, against a perturbed
/// snapshot, checked by central differences. Returns the worst relative error.
pub fn gradcheck(opts: GradcheckOptions) -> Result<f64, CliError> {
    let spec = GeneratorSpec {
        n_labels: 4,
        instances_per_label: 6,
        vocab_size: 200,
        trigger_words_per_label: 2,
        context_words_per_label: 6,
        sentence_len: [4, 6],
        descriptions_per_label: 2,
        seed: opts.seed,
        ..GeneratorSpec::default()
    };
    let corpus = data_synth::generate(&spec)?;
    let ds = corpus.dataset()?;
    let vocab = Vocab::build(corpus.records.iter().map(|r| r.text.as_str()));
    let config = EncoderConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 16,
        vocab_size: vocab.len(),
        layernorm_eps: 1e-5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut encoder = EncoderWeights::init(&config, vocab, &mut rng)?;
    encoder.freeze();
    let mut raw = RawDescriptions::new();
    for (l, d) in &corpus.descriptions {
        raw.entry(l.clone()).or_default().push(d.clone());
    }
    let ids: BTreeMap<String, usize> = ds.label_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let bank = encode_bank(&raw, &ids, &encoder)?;

    let train = TrainConfig {
        num_experts: 4,
        rank: 4,
        top_k: 2,
        loss: LossWeights {
            alpha_router: 0.5,
            alpha_label: 0.5,
            alpha_fd: 1.0,
            alpha_pd: 1.0,
        },
        seed: opts.seed,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(&encoder, Some(&bank), train)?;
    // Fresh B factors are zero, which would hide every A gradient.
    let mut init = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    for p in learner.model.pools.pools() {
        for e in &p.experts {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, 0.3).expect("valid std");
            for v in e.b.values_mut().iter_mut() {
                *v = normal.sample(&mut init);
            }
            for v in e.a.values_mut().iter_mut() {
                *v *= 10.0;
            }
        }
    }
    learner.model.head.grow(&[0, 1], &mut rng)?;
    learner.seen = vec![0, 1];
    learner.snapshot = Some(Snapshot::perturbed(&learner.model, 0.2, opts.seed + 1)?);
    learner.model.head.grow(&[2, 3], &mut rng)?;
    learner.seen = vec![0, 1, 2, 3];

    let batch: Vec<Instance> = ds
        .split(Split::Train)
        .take(6)
        .enumerate()
        .map(|(i, r)| {
            let mut inst = Instance::new(
                &r.text,
                r.label,
                usize::from(r.label >= 2),
                &encoder.vocab,
                config.max_seq_len,
            )?;
            if r.label < 2 && i % 2 == 0 {
                inst.source = Source::Memory;
            }
            Ok(inst)
        })
        .collect::<leaf_core::Result<_>>()?;
    let prepared = batch
        .iter()
        .map(|i| learner.prepare(i))
        .collect::<leaf_core::Result<Vec<_>>>()?;
    let pairs: Vec<_> = batch.iter().zip(&prepared).collect();
    if opts.poison_nan {
        learner.model.head.weight.values_mut()[0] = f64::NAN;
    }
    let (_, breakdown) = learner.batch_loss(&pairs)?;
    log::info!("gradcheck loss terms: {breakdown:?}");
    let params = learner.model.parameters();
    set_gradient_fault(opts.inject_fault);
    let err = grad_check(
        |_| Ok(learner.batch_loss(&pairs)?.0),
        &params,
        GRADCHECK_STEP,
        opts.seed,
    );
    set_gradient_fault(false);
    Ok(err?)
}
