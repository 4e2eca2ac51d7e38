use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub text: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledText {
    pub text: String,
    /// Dense id, in order of first appearance.
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub instances: Vec<LabeledText>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledText> {
        self.instances.iter().filter(move |i| i.split == split)
    }
}

pub fn parse_jsonl(text: &str, source: &str) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.label.is_empty() || rec.text.trim().is_empty() {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: "empty text or label".into(),
            });
        }
        let label = match ds.label_id(&rec.label) {
            Some(id) => id,
            None => {
                ds.label_names.push(rec.label.clone());
                ds.label_names.len() - 1
            }
        };
        ds.instances.push(LabeledText {
            text: rec.text,
            label,
            split: rec.split,
        });
    }
    Ok(ds)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    parse_jsonl(&fsutil::read_to_string(path)?, &path.display().to_string())
}
