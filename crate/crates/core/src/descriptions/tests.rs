use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{EncoderConfig, Vocab};

const TSV: &str =
    "natural_disaster\tAn extreme environmental phenomenon causing considerable devastation and human suffering.\n\
natural_disaster\tA sudden catastrophe of nature.\n\
\n\
attack\tViolence aimed at people.\n\
natural_disaster\tSevere weather that ruins towns.\n\
attack\tViolence aimed at people.\n";

fn encoder(seed: u64) -> EncoderWeights {
    let vocab = Vocab::build([TSV]);
    let cfg = EncoderConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 8,
        vocab_size: 0,
        layernorm_eps: 1e-12,
    };
    let mut w = EncoderWeights::init(&cfg, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    w.freeze();
    w
}

fn ids() -> BTreeMap<String, usize> {
    [("natural_disaster".to_string(), 3), ("attack".to_string(), 7)].into()
}

#[test]
fn parse_counts_and_dedups() {
    let raw = parse_descriptions(TSV, "mem", None).unwrap();
    assert_eq!(raw["natural_disaster"].len(), 3);
    assert_eq!(raw["attack"].len(), 1);
    assert_eq!(
        raw["natural_disaster"][0],
        "An extreme environmental phenomenon causing considerable devastation and human suffering."
    );
}

#[test]
fn parse_errors() {
    let e = parse_descriptions("a\tok\nno tab here\n", "f.tsv", None).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    assert!(e.to_string().starts_with("f.tsv:2:"));
    assert!(parse_descriptions("", "f", None).is_err());
    assert!(parse_descriptions("\n\n", "f", None).is_err());
    assert!(parse_descriptions("\tdesc\n", "f", None).is_err());
    let known: HashSet<String> = ["attack".to_string()].into();
    let e = parse_descriptions(TSV, "f", Some(&known)).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 1, .. }));
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tsv");
    std::fs::write(&p, TSV).unwrap();
    assert_eq!(load_descriptions(&p, None).unwrap().len(), 2);
    assert!(load_descriptions(&dir.path().join("missing.tsv"), None).is_err());
}

#[test]
fn bank_is_deterministic_and_fingerprinted() {
    let raw = parse_descriptions(TSV, "mem", None).unwrap();
    let w = encoder(1);
    let bank = encode_bank(&raw, &ids(), &w).unwrap();
    assert_eq!(bank.anchors()[&3].shape(), &[3, 8]);
    assert_eq!(bank.count(7), 1);
    let again = encode_bank(&raw, &ids(), &w).unwrap();
    for (a, b) in bank.anchors().values().zip(again.anchors().values()) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
    bank.ensure_encoder(&w).unwrap();
    let other = encoder(2);
    assert!(matches!(
        bank.ensure_encoder(&other),
        Err(Error::FingerprintMismatch { .. })
    ));
    bank.ensure_covers(&[3, 7]).unwrap();
    assert!(bank.ensure_covers(&[3, 9]).is_err());

    // The same text twice encodes identically.
    let mut dup = RawDescriptions::new();
    dup.insert("attack".into(), vec!["violence aimed".into()]);
    dup.insert("natural_disaster".into(), vec!["violence aimed".into()]);
    let b = encode_bank(&dup, &ids(), &w).unwrap();
    assert_eq!(b.anchors()[&3].to_vec(), b.anchors()[&7].to_vec());

    let mut unfrozen = EncoderWeights::init(&w.config, w.vocab.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(encode_bank(&raw, &ids(), &unfrozen).is_err());
    unfrozen.freeze();
    let mut missing = ids();
    missing.remove("attack");
    assert!(encode_bank(&raw, &missing, &unfrozen).is_err());
}

#[test]
fn subsets() {
    let raw = parse_descriptions(TSV, "mem", None).unwrap();
    let bank = encode_bank(&raw, &ids(), &encoder(4)).unwrap();
    let all: BTreeMap<_, _> = [
        ("natural_disaster".to_string(), raw["natural_disaster"].clone()),
        ("attack".to_string(), vec!["one".into(), "two".into(), "three".into()]),
    ]
    .into();
    let bank3 = encode_bank(&all, &ids(), &encoder(4)).unwrap();
    let full = subset_bank(&bank3, 3, 9).unwrap();
    for l in [3, 7] {
        assert_eq!(full.texts(l), bank3.texts(l));
        assert_eq!(full.anchors()[&l].to_vec(), bank3.anchors()[&l].to_vec());
    }
    let a = subset_bank(&bank3, 1, 5).unwrap();
    let b = subset_bank(&bank3, 1, 5).unwrap();
    assert_eq!(a.texts(3), b.texts(3));
    assert_eq!(a.anchors()[&3].shape(), &[1, 8]);
    let picked = &a.texts(3).unwrap()[0];
    let row = bank3.texts(3).unwrap().iter().position(|t| t == picked).unwrap();
    assert_eq!(a.anchors()[&3].to_vec(), bank3.anchors()[&3].row(row).unwrap().to_vec());
    let e = subset_bank(&bank, 2, 0).unwrap_err();
    assert!(e.to_string().contains("label 7"), "{e}");
}

#[test]
fn prompt_template() {
    let p = export_prompt_template("natural disaster", 1);
    assert!(p.contains("please generate 1 concise description"));
    assert!(p.contains("concise 1 description"));
    let p = export_prompt_template("natural_disaster", 3);
    assert!(p.contains("given the event: natural disaster,"));
    assert!(p.contains('3'));
    assert!(!p.contains('{'));
}
