//! F1 scores over closed label sets, the lower-triangular per-task matrix,
//! forgetting, and mean/std aggregation across seeds.
//!
//! Every instance has exactly one gold and one predicted label from the same
//! closed set, so micro-F1 equals accuracy here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(gold: &[usize], pred: &[usize], labels: &[usize]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if let Some(bad) = gold.iter().chain(pred).find(|l| !labels.contains(l)) {
        return Err(Error::invalid(format!(
            "label {bad} is outside the evaluated label set"
        )));
    }
    Ok(())
}

/// Pooled TP/FP/FN over `labels`. Empty input scores 0.
pub fn micro_f1(gold: &[usize], pred: &[usize], labels: &[usize]) -> Result<f64> {
    check(gold, pred, labels)?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let tp = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64;
    let fp = gold.len() as f64 - tp;
    let fnn = fp;
    Ok(2.0 * tp / (2.0 * tp + fp + fnn))
}

/// Unweighted mean of per-class F1. A class absent from `gold` counts (as 0)
/// only if it was predicted; otherwise it is skipped.
pub fn macro_f1(gold: &[usize], pred: &[usize], labels: &[usize]) -> Result<f64> {
    check(gold, pred, labels)?;
    let mut scores = Vec::new();
    for &c in labels {
        let tp = gold.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count() as f64;
        let in_gold = gold.iter().filter(|g| **g == c).count() as f64;
        let in_pred = pred.iter().filter(|p| **p == c).count() as f64;
        if in_gold == 0.0 && in_pred == 0.0 {
            continue;
        }
        scores.push(2.0 * tp / (in_gold + in_pred));
    }
    Ok(if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    })
}

/// Row `t` holds scores after training task `t` on every task `i ≤ t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMatrix {
    pub micro: Vec<Vec<f64>>,
    pub macro_: Vec<Vec<f64>>,
    /// Micro-F1 over the union of test sets of tasks `0..=t`.
    pub cumulative_micro: Vec<f64>,
    pub cumulative_macro: Vec<f64>,
}

impl MetricMatrix {
    pub fn num_tasks(&self) -> usize {
        self.micro.len()
    }

    /// Appends the scores measured after one more task.
    pub fn push_row(&mut self, micro: Vec<f64>, macro_: Vec<f64>, cum_micro: f64, cum_macro: f64) -> Result<()> {
        let t = self.num_tasks();
        if micro.len() != t + 1 || macro_.len() != t + 1 {
            return Err(Error::invalid(format!("row {t} must have {} entries", t + 1)));
        }
        let all = micro.iter().chain(&macro_).chain([&cum_micro, &cum_macro]);
        if all.into_iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("scores must lie in [0, 1]"));
        }
        self.micro.push(micro);
        self.macro_.push(macro_);
        self.cumulative_micro.push(cum_micro);
        self.cumulative_macro.push(cum_macro);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_tasks();
        let shaped = |m: &Vec<Vec<f64>>| m.len() == t && m.iter().enumerate().all(|(i, r)| r.len() == i + 1);
        if !shaped(&self.micro)
            || !shaped(&self.macro_)
            || self.cumulative_micro.len() != t
            || self.cumulative_macro.len() != t
        {
            return Err(Error::invalid("metric matrix is not lower-triangular and complete"));
        }
        Ok(())
    }

    pub fn final_cumulative_micro(&self) -> Option<f64> {
        self.cumulative_micro.last().copied()
    }

    /// Comma-separated, header `after_task,eval_task,micro_f1,macro_f1`, plus
    /// one `cumulative` row per task.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task,eval_task,micro_f1,macro_f1\n");
        for t in 0..self.num_tasks() {
            for i in 0..=t {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    t + 1,
                    i + 1,
                    self.micro[t][i],
                    self.macro_[t][i]
                ));
            }
            s.push_str(&format!(
                "{},cumulative,{},{}\n",
                t + 1,
                self.cumulative_micro[t],
                self.cumulative_macro[t]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub per_task: Vec<f64>,
    /// 0 when there is nothing to forget (a single task).
    pub mean: f64,
}

/// For each task but the last, its best score at any point minus its final score.
pub fn forgetting(m: &MetricMatrix) -> Result<Forgetting> {
    m.validate()?;
    let t = m.num_tasks();
    if t == 0 {
        return Err(Error::invalid("empty metric matrix"));
    }
    let last = &m.micro[t - 1];
    let per_task: Vec<f64> = (0..t - 1)
        .map(|i| {
            let best = (i..t).map(|r| m.micro[r][i]).fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .collect();
    let mean = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().sum::<f64>() / per_task.len() as f64
    };
    Ok(Forgetting { per_task, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

impl Cell {
    /// Population statistics of `values`.
    pub fn of(values: &[f64]) -> Cell {
        // Identical runs report exactly zero spread, free of rounding residue.
        if values.is_empty() {
            return Cell { mean: 0.0, std: 0.0 };
        }
        if values.iter().all(|v| *v == values[0]) {
            return Cell {
                mean: values[0],
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Cell { mean, std: var.sqrt() }
    }

    /// Percent with one decimal, as in `51.2±0.6`.
    pub fn render(&self) -> String {
        format!("{:.1}±{:.1}", self.mean * 100.0 + 0.0, self.std * 100.0 + 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub runs: usize,
    pub micro: Vec<Vec<Cell>>,
    pub cumulative_micro: Vec<Cell>,
    pub cumulative_macro: Vec<Cell>,
    pub forgetting: Cell,
}

pub fn aggregate_runs(runs: &[MetricMatrix]) -> Result<SeedAggregate> {
    if runs.len() < 2 {
        return Err(Error::invalid("aggregation needs at least two runs"));
    }
    for r in runs {
        r.validate()?;
        if r.num_tasks() != runs[0].num_tasks() {
            return Err(Error::invalid(format!(
                "runs cover {} and {} tasks",
                runs[0].num_tasks(),
                r.num_tasks()
            )));
        }
    }
    let t = runs[0].num_tasks();
    let micro = (0..t)
        .map(|row| {
            (0..=row)
                .map(|i| Cell::of(&runs.iter().map(|r| r.micro[row][i]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let col = |f: &dyn Fn(&MetricMatrix) -> &Vec<f64>| -> Vec<Cell> {
        (0..t)
            .map(|i| Cell::of(&runs.iter().map(|r| f(r)[i]).collect::<Vec<_>>()))
            .collect()
    };
    let forget = runs
        .iter()
        .map(|r| forgetting(r).map(|f| f.mean))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedAggregate {
        runs: runs.len(),
        micro,
        cumulative_micro: col(&|r| &r.cumulative_micro),
        cumulative_macro: col(&|r| &r.cumulative_macro),
        forgetting: Cell::of(&forget),
    })
}

#[cfg(test)]
mod tests;
