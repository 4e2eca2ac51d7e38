//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
//! any fails. Runs the full default pipeline, so expect a few minutes.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use leaf_cli::commands::{self, Axis, GradcheckOptions, Prepared, GRADCHECK_TOL};
use leaf_cli::config::{Mode, RunConfig};
use leaf_core::continual::RunResult;
use leaf_core::data_synth::Split;
use leaf_core::encoder::{encode_base, encode_with_experts, tokenize, EncoderWeights, Tokenized};
use leaf_core::eval_metrics::Cell;
use leaf_core::moe_lora::{route_instance, select_topk, ExpertPools, PoolLayout, Projection, RouterSettings};
use leaf_core::objectives::{
    ce_from_logits, feature_distill_loss, label_contrastive_loss, prediction_distill_from_logits, total_loss,
    ContrastiveOptions, DetectorHead, LossParts, LossWeights,
};
use leaf_core::Tensor;

use common::{code, leaf, read, run, Workspace, TINY_CONFIG};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Default data, a pretrained base, and every ladder mode over the default seeds.
struct Desk {
    prep: Prepared,
    cfg: RunConfig,
    runs: BTreeMap<&'static str, Vec<RunResult>>,
    seconds: BTreeMap<&'static str, f64>,
}

fn desk(dir: &Path) -> Desk {
    let cfg = RunConfig::default();
    let (data, base) = (dir.join("data"), dir.join("base"));
    commands::gen_data(&cfg.data, &data).expect("gen-data");
    commands::pretrain_base(&cfg, &data, &base).expect("pretrain-base");
    let prep = commands::prepare(&data, &base).expect("prepare");
    let mut runs = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for mode in Mode::LADDER {
        let start = Instant::now();
        let results = (0..cfg.n_seeds as u64)
            .map(|seed| {
                let c = RunConfig {
                    mode,
                    seed,
                    ..cfg.clone()
                };
                commands::train_run(&c, &prep, None).expect("continual run")
            })
            .collect();
        seconds.insert(mode.name(), start.elapsed().as_secs_f64());
        runs.insert(mode.name(), results);
    }
    Desk {
        prep,
        cfg,
        runs,
        seconds,
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let err = commands::gradcheck(GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        err <= GRADCHECK_TOL && secs < 60.0,
        format!("max relative error {err:.2e}, {secs:.1} s"),
    )
}

fn brute_topk(s: &[f64], k: usize) -> Vec<usize> {
    let m = s.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let sum: f64 = idx.iter().map(|&i| s[i]).sum();
        if best.as_ref().is_none_or(|(b, bi)| sum > *b || (sum == *b && idx < *bi)) {
            best = Some((sum, idx));
        }
    }
    best.expect("k <= m").1
}

fn routing_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(2..=8);
        let k = rng.random_range(1..=m);
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut got = select_topk(&s, k).map_err(|e| e.to_string())?;
        got.sort_unstable();
        mismatches += usize::from(got != brute_topk(&s, k));
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 1000 vectors"))
}

fn sentences(prep: &Prepared, n: usize) -> Vec<Tokenized> {
    let enc = &prep.encoder;
    prep.inputs
        .dataset
        .split(Split::Test)
        .step_by(3)
        .take(n)
        .map(|r| tokenize(&r.text, &enc.vocab, enc.config.max_seq_len).expect("tokenize"))
        .collect()
}

fn pools(enc: &EncoderWeights, m: usize, rank: usize, seed: u64) -> ExpertPools {
    let layout = PoolLayout {
        num_layers: enc.config.num_layers,
        model_dim: enc.config.model_dim,
        projections: vec![Projection::Q, Projection::V],
        num_experts: m,
        rank,
    };
    ExpertPools::init(&layout, 0.02, &mut ChaCha8Rng::seed_from_u64(seed)).expect("pools")
}

fn zero_delta(prep: &Prepared) -> Verdict {
    let enc = &prep.encoder;
    let fresh = pools(enc, 4, 8, 3);
    let mut worst = 0.0f64;
    let batch = sentences(prep, 100);
    for t in &batch {
        let base = encode_base(&t.ids, &t.mask, enc).map_err(|e| e.to_string())?;
        let dec = route_instance(&fresh, &base.cls, &RouterSettings::default()).map_err(|e| e.to_string())?;
        let ex = encode_with_experts(&t.ids, &t.mask, enc, &fresh, &dec).map_err(|e| e.to_string())?;
        worst = worst
            .max(max_diff(&base.cls, &ex.cls))
            .max(max_diff(&base.token_states, &ex.token_states));
    }
    check(
        batch.len() == 100 && worst <= 1e-12,
        format!("max abs diff {worst:.2e} over {} instances", batch.len()),
    )
}

fn weight_merge(prep: &Prepared) -> Verdict {
    let enc = &prep.encoder;
    let single = pools(enc, 1, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let merged = enc.deep_copy();
    for pool in single.pools() {
        let e = &pool.experts[0];
        for v in e.b.values_mut().iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let ab = e.a.matmul(&e.b).map_err(|e| e.to_string())?.to_vec();
        let layer = &merged.layers[pool.layer];
        let lin = match pool.projection {
            Projection::Q => &layer.q,
            Projection::K => &layer.k,
            Projection::V => &layer.v,
            Projection::O => &layer.o,
        };
        for (w, d) in lin.weight.values_mut().iter_mut().zip(&ab) {
            *w += d;
        }
    }
    let set = RouterSettings {
        top_k: 1,
        ..RouterSettings::default()
    };
    let (mut worst, mut moved) = (0.0f64, 0.0f64);
    for t in sentences(prep, 50) {
        let base = encode_base(&t.ids, &t.mask, enc).map_err(|e| e.to_string())?;
        let dec = route_instance(&single, &base.cls, &set).map_err(|e| e.to_string())?;
        if dec.entries.iter().any(|e| e.weights.to_vec() != [1.0]) {
            return Err("single-expert weight is not 1".into());
        }
        let ex = encode_with_experts(&t.ids, &t.mask, enc, &single, &dec).map_err(|e| e.to_string())?;
        let m = encode_base(&t.ids, &t.mask, &merged).map_err(|e| e.to_string())?;
        worst = worst
            .max(max_diff(&ex.cls, &m.cls))
            .max(max_diff(&ex.token_states, &m.token_states));
        moved = moved.max(max_diff(&ex.cls, &base.cls));
    }
    check(
        worst <= 1e-10 && moved > 1e-6,
        format!("max abs diff {worst:.2e} (adapter shifts outputs by {moved:.2e})"),
    )
}

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rand = |shape: &[usize], scale: f64| {
        let v: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor::new(v, shape).expect("shape")
    };
    let e = |e: leaf_core::Error| e.to_string();

    let f = rand(&[4, 16], 2.0);
    let fd = feature_distill_loss(&f, &f).map_err(e)?.item();
    let logits = rand(&[4, 6], 3.0);
    let pd = prediction_distill_from_logits(&logits, &logits, 1.0).map_err(e)?.item();
    let p = logits.softmax(1).map_err(e)?.to_vec();
    let entropy = -p.iter().map(|v| v * v.ln()).sum::<f64>() / 4.0;
    let a = fd <= 1e-12 && (pd - entropy).abs() <= 1e-9;

    // Label 1's description differs from label 0's only orthogonally to the feature.
    let mut worst_label = 0.0f64;
    for _ in 0..20 {
        let f = rand(&[1, 8], 1.0);
        let z0 = rand(&[1, 8], 1.0).to_vec();
        let fv = f.to_vec();
        let v = rand(&[1, 8], 1.0).to_vec();
        let proj = v.iter().zip(&fv).map(|(a, b)| a * b).sum::<f64>() / fv.iter().map(|x| x * x).sum::<f64>();
        let z1: Vec<f64> = z0.iter().zip(&v).zip(&fv).map(|((z, v), f)| z + v - proj * f).collect();
        let anchors: BTreeMap<usize, Tensor> = [
            (0, Tensor::new(z0, &[1, 8]).map_err(e)?),
            (1, Tensor::new(z1, &[1, 8]).map_err(e)?),
        ]
        .into();
        let l = label_contrastive_loss(&f, &[0], &anchors, &[0, 1], ContrastiveOptions::default()).map_err(e)?;
        worst_label = worst_label.max(l.item().abs());
    }
    let b = worst_label <= 1e-9;

    let mut head = DetectorHead::new(16, false, &mut ChaCha8Rng::seed_from_u64(7)).map_err(e)?;
    head.grow(&[3, 5, 7, 9], &mut ChaCha8Rng::seed_from_u64(8)).map_err(e)?;
    let uniform = Tensor::new(vec![0.25; 8], &[2, 4]).map_err(e)?;
    let ce = ce_from_logits(&uniform, &head, &[5, 9]).map_err(e)?.item();
    let c = (ce - 4f64.ln()).abs() <= 1e-9;

    let parts = LossParts {
        ce: Tensor::scalar(1.3),
        router: Some(Tensor::scalar(-2.1)),
        label: Some(Tensor::scalar(0.4)),
        fd: Some(Tensor::scalar(0.07)),
        pd: Some(Tensor::scalar(0.9)),
    };
    let w = LossWeights::default();
    let (_, br) = total_loss(&parts, &w).map_err(e)?;
    let hand = 1.3 + w.alpha_router * -2.1 + w.alpha_label * 0.4 + w.alpha_fd * 0.07 + w.alpha_pd * 0.9;
    let d = (br.total - hand).abs() <= 1e-12;

    check(
        a && b && c && d,
        format!(
            "(a) fd {fd:.1e}, pd-entropy {:.1e} (b) label {worst_label:.1e} (c) ce-ln4 {:.1e} (d) total-hand {:.1e}",
            (pd - entropy).abs(),
            (ce - 4f64.ln()).abs(),
            (br.total - hand).abs()
        ),
    )
}

fn finals(runs: &[RunResult]) -> Cell {
    let v: Vec<f64> = runs
        .iter()
        .map(|r| r.matrix.final_cumulative_micro().unwrap_or(0.0))
        .collect();
    Cell::of(&v)
}

fn forgetting(runs: &[RunResult]) -> Cell {
    Cell::of(&runs.iter().map(|r| r.forgetting.mean).collect::<Vec<_>>())
}

fn improvement(d: &Desk) -> Verdict {
    let (leaf, base) = (&d.runs["leaf"], &d.runs["baseline-single-lora"]);
    let gap = (finals(leaf).mean - finals(base).mean) * 100.0;
    let (fl, fb) = (forgetting(leaf).mean, forgetting(base).mean);
    let slowest = d.seconds.values().copied().fold(0.0, f64::max);
    check(
        gap >= 5.0 && fl < fb && slowest <= 600.0,
        format!(
            "leaf {} vs baseline {} ({gap:+.1} pts), forgetting {} vs {}, slowest mode {slowest:.0} s",
            finals(leaf).render(),
            finals(base).render(),
            forgetting(leaf).render(),
            forgetting(base).render()
        ),
    )
}

fn ladder(d: &Desk) -> Verdict {
    let means: Vec<f64> = Mode::LADDER
        .iter()
        .map(|m| finals(&d.runs[m.name()]).mean * 100.0)
        .collect();
    let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).filter(|x| *x > 0.0).collect();
    let ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.5);
    let shown: Vec<String> = Mode::LADDER
        .iter()
        .zip(&means)
        .map(|(m, v)| format!("{} {v:.1}", m.name()))
        .collect();
    check(ok, shown.join(" <= "))
}

fn sweeps(dir: &Path) -> Verdict {
    let ws = Workspace::ready(TINY_CONFIG);
    let cfg = RunConfig::parse(TINY_CONFIG, Path::new("tiny.toml")).map_err(|e| e.to_string())?;
    let prep = commands::prepare(&ws.data(), &ws.base()).map_err(|e| e.to_string())?;
    let mut shapes = Vec::new();
    for axis in [Axis::NDescriptions, Axis::NExperts] {
        let out = dir.join(axis.name());
        let runs = commands::ablate(&cfg, &prep, axis, &out).map_err(|e| e.to_string())?;
        let grid =
            std::fs::read_to_string(out.join(format!("ablation_{}.csv", axis.name()))).map_err(|e| e.to_string())?;
        let summary = std::fs::read_to_string(out.join(format!("ablation_{}_summary.csv", axis.name())))
            .map_err(|e| e.to_string())?;
        let settings: Vec<String> = axis.settings(&cfg).into_iter().map(|(s, _)| s).collect();
        let rows = grid.lines().count() - 1;
        let cols_ok = grid.lines().all(|l| l.split(',').count() == cfg.stream.num_tasks + 3);
        let cells_ok = settings
            .iter()
            .all(|s| runs.iter().filter(|r| &r.setting == s).count() == cfg.n_seeds);
        if rows != settings.len() * cfg.n_seeds
            || !cols_ok
            || !cells_ok
            || summary.lines().count() != settings.len() + 1
        {
            return Err(format!(
                "{} grid has {rows} rows for settings {settings:?}",
                axis.name()
            ));
        }
        shapes.push(format!(
            "{} {{{}}} x {} seeds",
            axis.name(),
            settings.join(","),
            cfg.n_seeds
        ));
    }
    Ok(shapes.join("; "))
}

fn determinism() -> Verdict {
    let ws = Workspace::new(TINY_CONFIG);
    let mut same = Vec::new();
    for tag in ["a", "b"] {
        let data = ws.path(&format!("data_{tag}"));
        let base = ws.path(&format!("base_{tag}"));
        let out = ws.path(&format!("run_{tag}"));
        let steps = [
            run(leaf()
                .arg("gen-data")
                .arg("--config")
                .arg(ws.config())
                .arg("--out")
                .arg(&data)),
            run(leaf()
                .arg("pretrain-base")
                .arg("--config")
                .arg(ws.config())
                .arg("--data")
                .arg(&data)
                .arg("--out")
                .arg(&base)),
            run(leaf()
                .arg("train")
                .arg("--config")
                .arg(ws.config())
                .arg("--data")
                .arg(&data)
                .arg("--base")
                .arg(&base)
                .arg("--out")
                .arg(&out)),
        ];
        if let Some(bad) = steps.iter().find(|o| code(o) != 0) {
            return Err(String::from_utf8_lossy(&bad.stderr).into_owned());
        }
    }
    for (dir, file) in [
        ("data", "dataset.jsonl"),
        ("data", "descriptions.tsv"),
        ("base", "encoder.bin"),
        ("base", "base_report.json"),
        ("run", "metrics.json"),
        ("run", "losses.csv"),
    ] {
        let a = read(&ws.path(&format!("{dir}_a")).join(file));
        let b = read(&ws.path(&format!("{dir}_b")).join(file));
        if a != b {
            return Err(format!("{dir}/{file} differs between invocations"));
        }
        same.push(format!("{dir}/{file}"));
    }
    Ok(format!("bit-identical: {}", same.join(", ")))
}

fn protocol(d: &Desk) -> Verdict {
    let n = d.cfg.stream.n_way;
    let expected: Vec<usize> = (0..d.cfg.stream.num_tasks).map(|t| n * t).collect();
    let mut total = 0;
    for (mode, runs) in &d.runs {
        for (seed, r) in runs.iter().enumerate() {
            total += 1;
            let c = &r.checks;
            let mut failures = c.failures(n);
            if c.memory_at_start != expected {
                failures.push(format!("memory sizes {:?}", c.memory_at_start));
            }
            if c.encoder_hash_before != d.prep.encoder.fingerprint().map_err(|e| e.to_string())? {
                failures.push("encoder hash differs from the stored base".into());
            }
            if !failures.is_empty() {
                return Err(format!("{mode} seed {seed}: {}", failures.join("; ")));
            }
        }
    }
    Ok(format!(
        "{total} full {}-task runs: disjoint labels, memory {expected:?}, encoder hash stable, old rows kept, snapshot grad-free",
        d.cfg.stream.num_tasks
    ))
}

fn main() {
    // Quiet the library's progress logging unless asked for.
    if std::env::var_os("RUST_LOG").is_none() {
        std::env::set_var("RUST_LOG", "warn");
    }
    let _ = env_logger::builder().is_test(true).try_init();
    let scratch = tempfile::tempdir().expect("scratch dir");
    let started = Instant::now();
    let desk = catch_unwind(AssertUnwindSafe(|| desk(scratch.path())));
    let with_desk = |f: fn(&Desk) -> Verdict| match &desk {
        Ok(d) => f(d),
        Err(_) => Err("default pipeline failed".to_string()),
    };
    type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Verdict + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("routing oracle", Box::new(routing_oracle)),
        (
            "zero-delta equivalence",
            Box::new(|| with_desk(|d| zero_delta(&d.prep))),
        ),
        ("weight-merge oracle", Box::new(|| with_desk(|d| weight_merge(&d.prep)))),
        ("loss oracles", Box::new(loss_oracles)),
        ("continual improvement", Box::new(|| with_desk(improvement))),
        ("component ladder", Box::new(|| with_desk(ladder))),
        ("sweep plumbing", Box::new(|| sweeps(scratch.path()))),
        ("determinism", Box::new(determinism)),
        ("protocol invariants", Box::new(|| with_desk(protocol))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    println!(
        "{} of 10 criteria passed in {:.0} s",
        10 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
