//! Shared helpers for the binary-level tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough that a whole pipeline runs in a few seconds.
pub const TINY_CONFIG: &str = r#"
n_seeds = 2
n_descriptions = 2

[data]
n_labels = 10
instances_per_label = 16
vocab_size = 300
trigger_words_per_label = 2
context_words_per_label = 8
sentence_len = [4, 8]
descriptions_per_label = 5
seed = 3

[encoder]
num_layers = 1
model_dim = 16
num_heads = 2
ffn_dim = 32
max_seq_len = 12

[base]
num_labels = 4
epochs = 4
mlm_epochs = 2

[stream]
n_way = 2
k_shot = 3
num_tasks = 3

[train]
epochs = 2
rank = 2
"#;

/// The binary with a clean seed environment.
pub fn leaf() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_leaf"));
    cmd.env_remove("LEAF_SEED").env("RUST_LOG", "warn");
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[track_caller]
pub fn ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A scratch directory holding `config.toml`, `data/` and `base/`.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), config).unwrap();
        Self { dir }
    }

    /// Generated data plus a pretrained base.
    pub fn ready(config: &str) -> Self {
        let ws = Self::new(config);
        ok(&run(leaf()
            .arg("gen-data")
            .arg("--config")
            .arg(ws.config())
            .arg("--out")
            .arg(ws.data())));
        ok(&run(ws.with_inputs("pretrain-base", false).arg("--out").arg(ws.base())));
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    pub fn data(&self) -> PathBuf {
        self.path("data")
    }

    pub fn base(&self) -> PathBuf {
        self.path("base")
    }

    /// `leaf <sub> --config … --data … [--base …]`.
    pub fn with_inputs(&self, sub: &str, base: bool) -> Command {
        let mut cmd = leaf();
        cmd.arg(sub)
            .arg("--config")
            .arg(self.config())
            .arg("--data")
            .arg(self.data());
        if base {
            cmd.arg("--base").arg(self.base());
        }
        cmd
    }

    pub fn train(&self, out: &Path) -> Command {
        let mut cmd = self.with_inputs("train", true);
        cmd.arg("--out").arg(out);
        cmd
    }
}
