use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::learner::{LossRow, ProtocolChecks, RunResult, TaskReport};
use crate::error::{Error, Result};
use crate::eval_metrics::{Forgetting, MetricMatrix};
use crate::fsutil::write_atomic;

pub const METRICS_FILE: &str = "metrics.json";
pub const MATRIX_FILE: &str = "metrics_matrix.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Serialize)]
struct MetricsDoc<'a> {
    final_cumulative_micro_f1: f64,
    matrix: &'a MetricMatrix,
    forgetting: &'a Forgetting,
    checks: &'a ProtocolChecks,
    tasks: &'a [TaskReport],
}

/// `step,task,epoch,ce,router,label,fd,pd,total`, one row per optimizer step.
pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,task,epoch,ce,router,label,fd,pd,total\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.task, r.epoch, l.ce, l.router, l.label, l.fd, l.pd, l.total
        );
    }
    out
}

/// Writes metrics, losses, and per-task checkpoints under `dir`. Contents
/// depend only on `result`, so identical runs give identical bytes.
pub fn write_run_outputs(dir: &Path, result: &RunResult) -> Result<()> {
    let doc = MetricsDoc {
        final_cumulative_micro_f1: result.matrix.final_cumulative_micro().unwrap_or(0.0),
        matrix: &result.matrix,
        forgetting: &result.forgetting,
        checks: &result.checks,
        tasks: &result.tasks,
    };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join(METRICS_FILE), format!("{json}\n").as_bytes())?;
    write_atomic(&dir.join(MATRIX_FILE), result.matrix.to_csv().as_bytes())?;
    write_atomic(&dir.join(LOSSES_FILE), losses_csv(&result.losses).as_bytes())?;
    for (t, file) in result.checkpoints.iter().enumerate() {
        file.save(&dir.join(CHECKPOINT_DIR).join(format!("task_{}.bin", t + 1)))?;
    }
    Ok(())
}
