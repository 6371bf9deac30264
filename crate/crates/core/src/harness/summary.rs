use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::{mean, std_dev};

use super::config::{check_lr, ExperimentConfig};
use super::train::{run_training, TrainTrace};

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            std: std_dev(xs),
        }
    }
}

/// Per-iteration cross-seed statistics of one group of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub diverged: usize,
    pub iterations: Vec<usize>,
    pub mean_loss: Vec<f64>,
    pub mean_log_loss: Vec<f64>,
    pub std_log_loss: Vec<f64>,
    pub eval_iterations: Vec<usize>,
    pub mean_log_eval_loss: Vec<f64>,
    pub std_log_eval_loss: Vec<f64>,
    pub final_loss: MeanStd,
    pub final_log_loss: MeanStd,
}

fn column_stats(columns: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let width = columns[0].len();
    let mut means = Vec::with_capacity(width);
    let mut log_means = Vec::with_capacity(width);
    let mut log_stds = Vec::with_capacity(width);
    for i in 0..width {
        let xs: Vec<f64> = columns.iter().map(|c| c[i]).collect();
        let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        means.push(mean(&xs));
        log_means.push(mean(&logs));
        log_stds.push(std_dev(&logs));
    }
    (means, log_means, log_stds)
}

/// Cross-seed statistics of equal-length traces.
pub fn summarize(traces: &[TrainTrace]) -> Result<Summary> {
    let Some(first) = traces.first() else {
        return invalid("summarize needs at least one trace");
    };
    if traces.iter().any(|t| t.rows.len() != first.rows.len() || t.evals.len() != first.evals.len()) {
        return invalid("summarize needs traces of equal length");
    }
    if first.rows.is_empty() {
        return invalid("summarize needs nonempty traces");
    }
    let losses: Vec<Vec<f64>> = traces.iter().map(|t| t.rows.iter().map(|r| r.loss).collect()).collect();
    let (mean_loss, mean_log_loss, std_log_loss) = column_stats(&losses);
    let (mean_log_eval_loss, std_log_eval_loss) = if first.evals.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let evals: Vec<Vec<f64>> = traces.iter().map(|t| t.evals.iter().map(|e| e.eval_loss).collect()).collect();
        let (_, m, s) = column_stats(&evals);
        (m, s)
    };
    let finals: Vec<f64> = traces.iter().map(|t| t.final_loss().expect("nonempty")).collect();
    let final_logs: Vec<f64> = finals.iter().map(|x| x.ln()).collect();
    Ok(Summary {
        runs: traces.len(),
        diverged: traces.iter().filter(|t| t.diverged()).count(),
        iterations: first.rows.iter().map(|r| r.iter).collect(),
        mean_loss,
        mean_log_loss,
        std_log_loss,
        eval_iterations: first.evals.iter().map(|e| e.iter).collect(),
        mean_log_eval_loss,
        std_log_eval_loss,
        final_loss: MeanStd::of(&finals),
        final_log_loss: MeanStd::of(&final_logs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub lr: f64,
    /// Mean final loss over the seeds that did not diverge.
    pub mean_final_loss: Option<f64>,
    pub diverged: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub records: Vec<GridRecord>,
    pub best_lr: f64,
}

/// Trains every `(lr, seed)` pair and picks the learning rate with the
/// lowest mean final loss; ties go to the smaller rate.
pub fn grid_search(base: &ExperimentConfig, grid: &[f64], seeds: &[u64]) -> Result<GridSearchResult> {
    if grid.is_empty() || seeds.is_empty() {
        return invalid("grid search needs a nonempty grid and seed list");
    }
    for &lr in grid {
        check_lr(lr)?;
    }
    base.validate()?;
    let jobs: Vec<(usize, f64, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(i, &lr)| seeds.iter().map(move |&s| (i, lr, s)))
        .collect();
    let outcomes: Vec<(usize, Option<f64>)> = jobs
        .par_iter()
        .map(|&(i, lr, seed)| {
            let config = base.with_optimizer(base.optimizer.kind, lr);
            let trace = run_training(&config, seed)?;
            let fin = if trace.diverged() { None } else { trace.final_loss() };
            Ok((i, fin))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(grid.len());
    for (i, &lr) in grid.iter().enumerate() {
        let finals: Vec<f64> = outcomes.iter().filter(|(j, _)| *j == i).filter_map(|(_, f)| *f).collect();
        records.push(GridRecord {
            lr,
            mean_final_loss: (!finals.is_empty()).then(|| mean(&finals)),
            diverged: seeds.len() - finals.len(),
            runs: seeds.len(),
        });
    }
    let best = records
        .iter()
        .filter_map(|r| r.mean_final_loss.map(|m| (r.lr, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .ok_or(Error::NoViableLr)?;
    Ok(GridSearchResult {
        records,
        best_lr: best.0,
    })
}
