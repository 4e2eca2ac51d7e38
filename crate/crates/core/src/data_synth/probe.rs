use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{Dataset, Split};
use crate::encoder::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    /// Train-split instances per label the probe sees; few shots leave some
    /// triggers unseen, so context words matter.
    pub shots_per_label: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            shots_per_label: 2,
            epochs: 200,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Test accuracy of a softmax regression over binary bag-of-words features,
/// trained by full-batch gradient descent.
pub fn classifier_separability_probe(ds: &Dataset, opts: &ProbeOptions) -> f64 {
    let mut index: HashMap<String, usize> = HashMap::new();
    let featurize = |text: &str, index: &mut HashMap<String, usize>, grow: bool| -> Vec<usize> {
        let mut ids: Vec<usize> = normalize(text)
            .into_iter()
            .filter_map(|w| {
                let next = index.len();
                if grow {
                    Some(*index.entry(w).or_insert(next))
                } else {
                    index.get(&w).copied()
                }
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let c = ds.num_labels();
    let mut train = Vec::new();
    for label in 0..c {
        let mut pool: Vec<&str> = ds
            .split(Split::Train)
            .filter(|i| i.label == label)
            .map(|i| i.text.as_str())
            .collect();
        pool.shuffle(&mut rng);
        for t in pool.into_iter().take(opts.shots_per_label) {
            train.push((featurize(t, &mut index, true), label));
        }
    }
    let test: Vec<(Vec<usize>, usize)> = ds
        .split(Split::Test)
        .map(|i| (featurize(&i.text, &mut index, false), i.label))
        .collect();
    if train.is_empty() || test.is_empty() {
        return 0.0;
    }

    let v = index.len();
    let mut w = vec![0.0; c * v];
    let mut b = vec![0.0; c];
    let logits = |x: &[usize], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| b[k] + x.iter().map(|j| w[k * v + j]).sum::<f64>())
            .collect()
    };
    let n = train.len() as f64;
    for _ in 0..opts.epochs {
        let mut gw = vec![0.0; c * v];
        let mut gb = vec![0.0; c];
        for (x, y) in &train {
            let z = logits(x, &w, &b);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|s| (s - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / sum - f64::from(u8::from(k == *y));
                gb[k] += g;
                for j in x {
                    gw[k * v + j] += g;
                }
            }
        }
        for (p, g) in w.iter_mut().zip(&gw) {
            *p -= opts.lr * g / n;
        }
        for (p, g) in b.iter_mut().zip(&gb) {
            *p -= opts.lr * g / n;
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| crate::encoder::argmax(&logits(x, &w, &b)) == *y)
        .count();
    correct as f64 / test.len() as f64
}
